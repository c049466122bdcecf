from splitmix.nn.layers import (
    BN_MODES, Context, EVAL, TRAIN,
    BatchNorm, Conv2d, Dense, Flatten, MaxPool2d, ReLU, kaiming_std,
)
from splitmix.nn.losses import accuracy, cross_entropy
from splitmix.nn.model import (
    ARCH_PRESETS, Model, build_model, post_average_bn, resolve_arch,
)
from splitmix.nn.optim import SGD
from splitmix.nn.counting import count_macs, count_params, ensemble_macs, ensemble_params
