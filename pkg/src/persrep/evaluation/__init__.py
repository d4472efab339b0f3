from .dense import ConfidenceMap, DensePrediction, confidence_map, dense_predict, otsu_binarize, target_feature
from .metrics import COCO_IOU_THRESHOLDS, box_iou, dense_ap_f1, mask_iou, ndcg, pr_auc
from .protocol import (TASKS, EmbeddingTable, EvalReport, InstanceResult, classification_confidence, evaluate,
                       evaluate_instance, retrieval_ndcg)

__all__ = [
    "COCO_IOU_THRESHOLDS", "ConfidenceMap", "DensePrediction", "EmbeddingTable", "EvalReport", "InstanceResult",
    "TASKS", "box_iou", "classification_confidence", "confidence_map", "dense_ap_f1", "dense_predict",
    "evaluate", "evaluate_instance", "mask_iou", "ndcg", "otsu_binarize", "pr_auc", "retrieval_ndcg",
    "target_feature",
]
