BISECTION_ITERATIONS = 64
BISECTION_BOUND_PADDING = 10.0
SUM_TOLERANCE = 1e-3
SATURATION_FLOOR = 1e-300

INIT_STD = 1e-4
PADDED_SCORE = -1e9
CLAMP_EPS = 1e-7

# synthetic task
N_RANGE = (48, 64)
FEATURE_DIM = 32
NUM_CLASSES = 4
SIGNAL_TOKENS = 6
SINK_COUNT = 4
SINK_SCALE = 8.0
SINK_NOISE_FACTOR = 0.1
NOISE_STD = 0.25
DUPLICATE_FRAC = 0.2
TRAIN_SIZE = 8192
VAL_SIZE = 1024

# backbone
HIDDEN_DIM = 32
PRETRAIN_EPOCHS = 10
PRETRAIN_LR = 1e-2
PRETRAIN_MIN_ACCURACY = 0.95

# scorer training
BUDGET = 0.2
LR_PEAK = 1e-2
WARMUP_FRAC = 0.03
EPOCHS = 10
BATCH_SIZE = 64
LAMBDA_START = 0.1
LAMBDA_END = 2.0
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
WEIGHT_DECAY = 0.0
EVAL_EVERY = 100

SWEEP_BUDGETS = (0.05, 0.10, 0.20, 0.30)
BENCH_TOKENS = 2048
BENCH_BATCH = 8
BENCH_REPEATS = 10

SEED = 1234
