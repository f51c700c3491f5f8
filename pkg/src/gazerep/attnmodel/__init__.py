"""Config-driven CNN with reversible dilation, attention/classification heads and gaze losses."""
from .checkpoint import (BadMagicError, CheckpointError, TruncatedCheckpointError, VersionMismatchError,
                         checkpoint_bytes, load_checkpoint, read_checkpoint, save_checkpoint)
from .config import (ConfigError, NetworkConfig, ReceptiveField, StageConfig, StemConfig, attention_plan,
                     load_config, mini_config, output_factor, plan, probe_extents, receptive_field,
                     resnext_half_config)
from .losses import cell_centers, loss_gaze, loss_saliency, loss_saliency_logits, soft_argmax
from .network import (Network, attention_forward, build_network, classification_forward,
                      classification_logits, dilate_for_attention, forward_features,
                      undilate_for_classification)

__all__ = [
    "BadMagicError", "CheckpointError", "TruncatedCheckpointError", "VersionMismatchError",
    "checkpoint_bytes", "load_checkpoint", "read_checkpoint", "save_checkpoint", "ConfigError",
    "NetworkConfig", "ReceptiveField", "StageConfig", "StemConfig", "attention_plan", "load_config",
    "mini_config", "output_factor", "plan", "probe_extents", "receptive_field", "resnext_half_config",
    "cell_centers", "loss_gaze", "loss_saliency", "loss_saliency_logits", "soft_argmax", "Network",
    "attention_forward", "build_network", "classification_forward", "classification_logits",
    "dilate_for_attention", "forward_features", "undilate_for_classification",
]
