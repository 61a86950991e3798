"""Shared detection fixtures for the evaluation and acceptance suites."""
import numpy as np

from mig.evaluation import Prediction
from mig.prompt_library import Annotation, BoundingBox, ImageSample


def make_truth(boxes_by_image, cat=1, size=32):
    out = []
    for i, boxes in enumerate(boxes_by_image):
        anns = []
        for k, b in enumerate(boxes):
            m = np.zeros((size, size), bool)
            x, y, w, h = (int(v) for v in b)
            m[y:y + h, x:x + w] = True
            anns.append(Annotation(BoundingBox(*b), cat, m, i * 10 + k))
        out.append(ImageSample(np.zeros((size, size, 3), np.uint8), anns, i))
    return out


def make_pred(image_id, boxes, scores, cat=1, size=32):
    boxes = np.asarray(boxes, float).reshape(-1, 4)
    masks = np.zeros((len(boxes), size, size), bool)
    for k, (x, y, w, h) in enumerate(boxes.astype(int)):
        masks[k, y:y + h, x:x + w] = True
    return Prediction(image_id, boxes, np.asarray(scores, float), np.full(len(boxes), cat), masks)


def ap_fixture(seed, n_img=2):
    rng = np.random.default_rng(seed)
    boxes = []
    for _ in range(n_img):
        boxes.append([tuple(float(v) for v in (rng.integers(0, 16), rng.integers(0, 16), rng.integers(4, 12),
                                                rng.integers(4, 12))) for _ in range(rng.integers(0, 3))])
    if sum(map(len, boxes)) == 0:
        boxes[0].append((2.0, 2.0, 6.0, 6.0))
    truth = make_truth(boxes)
    n_det = int(rng.integers(0, 6))
    dets, preds = [], {}
    all_truth = [(i, b) for i, bs in enumerate(boxes) for b in bs]
    scores = rng.permutation(np.linspace(0.1, 0.9, n_det)) if n_det else []
    for k in range(n_det):
        img = int(rng.integers(0, n_img))
        if all_truth and rng.random() < 0.6:
            _, b = all_truth[rng.integers(0, len(all_truth))]
            b = tuple(v + float(rng.normal(0, 1.0)) if j < 2 else v for j, v in enumerate(b))
        else:
            b = (float(rng.integers(0, 16)), float(rng.integers(0, 16)), 6.0, 6.0)
        b = (max(b[0], 0.0), max(b[1], 0.0), b[2], b[3])
        dets.append((float(scores[k]), img, b))
        preds.setdefault(img, []).append((b, float(scores[k])))
    plist = [make_pred(i, [b for b, _ in v], [s for _, s in v]) for i, v in preds.items()]
    return truth, plist, dets, all_truth
