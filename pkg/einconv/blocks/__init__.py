from einconv.blocks.dense import FullyConnected, ReLU, Softmax
from einconv.blocks.einconv import Einconv
from einconv.blocks.models import Block
from einconv.blocks.pooling import GlobalAvgPool, MaxPool

BLOCK_MAP = {
    "Einconv": Einconv,
    "MaxPool": MaxPool,
    "GAP": GlobalAvgPool,
    "FC": FullyConnected,
    "ReLU": ReLU,
    "Softmax": Softmax,
}
