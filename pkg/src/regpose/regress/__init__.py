"""Pose regression networks, losses and the two-stage training schedule."""
from .losses import geodesic_loss, loss_total, rotvec_l2_loss, sample_loss
from .networks import (
    ARCH_TAGS, DEFAULT_WIDTHS, REDUCED_WIDTHS, Heads, PoseNetwork, Prediction, Widths,
    build_network, forward, image_tensor, load_network, predict, samples_to_tensor, save_network,
)
from .training import (
    EpochRecord, TrainConfig, config_dict, TrainingDiverged, TrainResult, gradient_check, read_history_csv,
    train, write_history_csv,
)
