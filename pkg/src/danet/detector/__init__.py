"""Two-stage detector built from the library's layers."""

from .anchors import AnchorConfig, MatchThresholds, assign_targets, generate_anchors
from .boxes import batched_nms, decode, encode, iou, iou_matrix, nms, nms_detections
from .model import Detection, Detector, Targets, rpn_forward
from .train import TrainingError, TrainResult, evaluate, infer, load_model, save_model, train
