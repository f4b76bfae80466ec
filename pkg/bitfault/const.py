"""
Constants and reference defaults shared across modules
"""

# Group norm
GN_EPS = 1e-5
GN_DEFAULT_GROUPS = 8

# Quantization
STORAGE_BITS = 8
DEGENERATE_RANGE_PAD = 1e-8
# Scaled values this close to an integer count as grid points (float32 round-off included)
GRID_SNAP = 1e-4

# Training
LOSS_GATE = 1.75
ADV_GRAD_CLIP = 0.05
CLIP_FLOOR = 0.2
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_EPOCHS = 3

# Evaluation
DEFAULT_CHIPS = 50
FAST_CHIPS = 10
ATTACK_EXAMPLES = 100
EVAL_EXAMPLES = 9000

# Files and environment
CHECKPOINT_FORMAT = 'bitfault-ckpt-v1'
DATA_ENV_VAR = 'BITFAULT_DATA'

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    'train': ('train-images-idx3-ubyte', 'train-labels-idx1-ubyte'),
    'test': ('t10k-images-idx3-ubyte', 't10k-labels-idx1-ubyte'),
}

# Named random streams derived from an experiment seed
STREAM_SHUFFLE = 'train-shuffle'
STREAM_BIT_ERROR = 'bit-error'
STREAM_ATTACK_INIT = 'attack-init'
STREAM_CHIPS = 'chips'
