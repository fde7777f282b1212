"""Vector-injected in-context learning for patch-based forecasting on a frozen transformer."""

from .context import (
    AdapterStack,
    ContextAdapter,
    ContextVector,
    ExamplePair,
    RepresentationVector,
    adapt,
    aggregate,
    extract_representation,
    extract_representations,
    make_adapter,
    mutual_info_histogram,
    render_example,
    sample_examples,
)
from .errors import (
    CapacityError,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    LviclError,
    NumericalError,
    TrainingError,
)
from .forecaster import ForecastModel, TrainConfig, evaluate, forecast, train_lvicl, train_stage_a
from .transformer import InjectionPlan, TransformerConfig, TransformerWeights, forward, init_frozen

__version__ = "0.1.0"
