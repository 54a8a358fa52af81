"""Named run presets in the flat config format.

``desk`` fits a single CPU in well under an hour per model; ``paper`` is the
full scale (12,800 training premises, 768-d encoders, 32 epochs).
"""

DESK = """\
# desk scale: one CPU, minutes per model
data.seed = 0
data.num_train = 2000
data.num_dev = 200
data.num_test = 400
data.dev_instances = 600
data.test_instances = 1200
data.multistep_premises = 400
data.max_nodes = 80

seed = 0
epochs = 10
batch_size = 64
learning_rate = 0.0001
tau = 20
paradigm = translation
clip_norm = 1.0
encoder.family = lstm
encoder.dim = 64
"""

PAPER = """\
# full scale: 12,800 training premises, 768-d encoder
data.seed = 0
data.num_train = 12800
data.num_dev = 2000
data.num_test = 5000
data.dev_instances = 3000
data.test_instances = 6000
data.multistep_premises = 5000
data.max_nodes = 120

seed = 0
epochs = 32
batch_size = 64
learning_rate = 0.00001
tau = 20
paradigm = translation
clip_norm = 1.0
encoder.family = lstm
encoder.dim = 768
"""

PRESETS = {"desk": DESK, "paper": PAPER}
