"""patchadv: transferable adversarial perturbation generators trained with
global feature and local patch-contrast objectives against frozen classifiers."""

from .data import (
    DatasetManifest,
    ImageBatch,
    ManifestEntry,
    ManifestError,
    Normalization,
    decode_labels,
    encode_labels,
    load_class_list,
    load_image,
    load_manifest,
    make_batches,
    preprocess_image,
)
from .evaluation import (
    EvalReport,
    EvalRow,
    classify_setting,
    evaluate_attack,
    multilabel_accuracy,
    predict_labels,
    run_setting_suite,
    top1_accuracy,
)
from .generator import PerturbationGenerator, generator_forward, perturb, project
from .losses import (
    LossConfig,
    PatchTriplet,
    build_patch_triplets,
    combined_objective,
    global_loss,
    lpcl_loss,
    sample_locations,
    similarity,
)
from .surrogate import (
    ClassifierHandle,
    FeatureMapSet,
    SmallCNN,
    compute_cam,
    extract_features,
    forward_logits,
    forward_with_features,
    load_classifier,
    parameter_checksum,
    save_classifier,
)
from .training import (
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train_generator,
    train_step,
)

__version__ = "0.1.0"

__all__ = [
    "ClassifierHandle", "DatasetManifest", "EvalReport", "EvalRow", "FeatureMapSet",
    "ImageBatch", "LossConfig", "ManifestEntry", "ManifestError", "Normalization",
    "PatchTriplet", "PerturbationGenerator", "SmallCNN", "TrainConfig",
    "build_patch_triplets", "classify_setting", "combined_objective", "compute_cam",
    "decode_labels", "encode_labels", "evaluate_attack", "extract_features",
    "forward_logits", "forward_with_features", "generator_forward", "global_loss",
    "load_checkpoint", "load_class_list", "load_classifier", "load_image",
    "load_manifest", "lpcl_loss", "make_batches", "multilabel_accuracy",
    "parameter_checksum", "perturb", "predict_labels", "preprocess_image", "project",
    "run_setting_suite", "sample_locations", "save_checkpoint", "save_classifier",
    "similarity", "top1_accuracy", "train_generator", "train_step",
]
