"""groundprobe: a desk-scale lab for measuring visual grounding in caption generators.

Train four image-conditioned GRU caption architectures (init-inject,
pre-inject, par-inject, merge) on a deterministic synthetic grounded dataset,
then quantify how much visual information each uses per generated word via
gradient sensitivity analysis and foil-image omission scoring.
"""

from .analysis import (
    AggregateCurve,
    AnalysisError,
    CaptionSample,
    CurvePoint,
    OmissionRecord,
    SensitivityRecord,
    WordClassTable,
    aggregate,
    build_foil_map,
    cosine_distance,
    fraction_negative,
    js_divergence,
    omission_scoring,
    select_foil,
    sensitivity_analysis,
    word_class_table,
)
from .autodiff import (
    ExprGraph,
    GraphError,
    ShapeError,
    backward,
    finite_diff,
    sigmoid,
    stable_softmax,
)
from .captioner import (
    END_ID,
    START_ID,
    UNK_ID,
    ArchitectureKind,
    CaptionerError,
    CheckpointError,
    ModelParams,
    StepTrace,
    build_loss_graph,
    build_replay_graph,
    forward_replay,
    generate,
    gru_step,
    image_projection,
    load_params,
    save_params,
)
from .synthworld import (
    ConfigError,
    DatasetError,
    Grammar,
    GroundedExample,
    Scene,
    SynthConfig,
    SynthDataset,
    Vocabulary,
    build_vocabulary,
    classes_for_tokens,
    generate_dataset,
    read_dataset,
    write_dataset,
)
from .trainer import (
    EpochStats,
    Hyperparams,
    TrainingDivergedError,
    TrainResult,
    clip_gradients,
    init_params,
    perplexity,
    train,
)

__version__ = "0.1.0"
