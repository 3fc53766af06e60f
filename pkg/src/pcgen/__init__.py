"""pcgen: labeled point-cloud generation and part-aware evaluation toolkit."""

from .core import (
    LabeledPointCloud,
    PartVocabulary,
    PointCloudSet,
    SetManifest,
    part_set,
    read_lpc,
    read_lpcs,
    read_set,
    write_lpc,
    write_lpcs,
    write_set,
)
from .distances import (
    DistanceKind,
    DistanceMatrix,
    chamfer,
    distance_matrix,
    emd_exact,
    part_aware_chamfer,
    snap_score,
    squared_distances,
)
from .metrics import (
    MetricReport,
    coverage,
    miou,
    mmd,
    one_nna,
    part_averaged_metric,
)
from .synth import (
    AttackConfig,
    ShapeFamilyConfig,
    recombine_attack,
    split_set,
    synth_set,
)
from .nn import (
    AdamState,
    MlpStack,
    adam_step,
    grad_check,
    load_checkpoint,
    max_pool_points,
    one_hot,
    save_checkpoint,
    softmax_xent,
)
from .vae import (
    VaeParams,
    VaeTrainConfig,
    decode_points,
    elbo_loss,
    encode_global,
    encode_points,
    train_vae,
)
from .diffusion import (
    DiffusionTrainConfig,
    GlobalDenoiserParams,
    NoiseSchedule,
    PointDenoiserParams,
    global_diffusion_loss,
    point_diffusion_loss,
    predict_point,
    q_sample,
    train_diffusion,
)
from .sampling import (
    EditRequest,
    EmaLabelState,
    edit,
    ema_update,
    generate,
    reconstruct_cloud,
    sample_global,
    sample_points,
)

__version__ = "0.1.0"
