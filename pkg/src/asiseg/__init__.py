"""Audio-driven, intention-oriented instrument segmentation."""

from .audio import (
    AudioClip,
    AudioEncoder,
    IntentClassifier,
    IntentLabel,
    MelConfig,
    MelSpectrogram,
    NormalizedMel,
    NormStats,
    classify_intent,
    compute_mel,
    encode_audio,
    fit_norm_stats,
    normalize_mel,
    perturb_audio,
    read_wav,
    write_wav,
)
from .bank import (
    DescriptionBank,
    HashedTextEncoder,
    InstrumentDescription,
    default_bank,
    encode_descriptions,
    load_bank,
)
from .data import (
    DatasetManifest,
    SceneSample,
    SynthConfig,
    generate_dataset,
    load_endovis,
    load_split,
    read_manifest,
    synth_command_audio,
    verify_manifest,
)
from .decoder import MaskDecoder, decode_mask, dice_loss, dice_loss_probs, threshold
from .errors import (
    AsisegError,
    CheckpointError,
    DatasetError,
    SchemaError,
    TrainingDivergedError,
)
from .fusion import (
    ImageEncoder,
    ImageFeatureMap,
    IntentPartition,
    TextFusion,
    assign_by_intent,
    encode_image,
    similarity_maps,
    text_fuse,
    visual_fuse,
)
from .model import AsiSegModel, ModelConfig, load_checkpoint, save_checkpoint
from .prompts import (
    ClassPooledEmbeddings,
    DistinguishingAttention,
    PromptPair,
    PromptProjection,
    RefinedFeatures,
    contrastive_loss,
    distinguishing_attention,
    emit_prompts,
    inverse_residual,
    pool_gt_features,
    refine_partition,
)
from .train_eval import (
    MetricsReport,
    TrainConfig,
    compute_iou,
    evaluate_intention,
    evaluate_intention_detailed,
    evaluate_semantic,
    robustness_sweep,
    total_loss,
    train,
)

__version__ = "0.1.0"
