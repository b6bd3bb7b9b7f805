"""Retinal lesion analysis toolkit.

Thin Python surface over the C++ core: segmentation metrics (IOU, mAP,
confusion/accuracy), binary mask morphology, the detection record format,
the synthetic dataset generator and the severity classifier.
"""

from ._core import (
    accuracy,
    blob_detect,
    confusion_from_labels,
    decode_mask_rle,
    dilate_mask,
    encode_mask_rle,
    eval_detection_files,
    generate_synthetic,
    grad_check,
    iou_box,
    iou_mask,
    map_raw_severity,
    normalize_image,
    run_end_to_end,
    split_instances,
    tight_bbox,
    train_severity,
    write_synthetic_dataset,
)

__all__ = [
    "accuracy",
    "blob_detect",
    "confusion_from_labels",
    "decode_mask_rle",
    "dilate_mask",
    "encode_mask_rle",
    "eval_detection_files",
    "generate_synthetic",
    "grad_check",
    "iou_box",
    "iou_mask",
    "map_raw_severity",
    "normalize_image",
    "run_end_to_end",
    "split_instances",
    "tight_bbox",
    "train_severity",
    "write_synthetic_dataset",
]
