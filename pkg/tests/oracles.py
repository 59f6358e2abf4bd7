"""Slow, independent reference implementations used by the tests."""
import itertools

import numpy as np


def brute_force_assignment_cost(cost):
    """Minimum total cost over every one-to-one assignment."""
    cost = np.asarray(cost)
    n, k = cost.shape
    if n == 0 or k == 0:
        return 0.0
    if n >= k:
        return min(sum(cost[p[j], j] for j in range(k)) for p in itertools.permutations(range(n), k))
    return min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(k), n))


def raster_giou(a, b, cells=1000):
    """GIoU from cell counts on a grid laid over the enclosing box.

    Axis-aligned boxes make the 2-D masks separable, so counts are products of
    per-axis counts of cell centres.
    """
    ca = [a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2]
    cb = [b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2]
    x0, y0 = min(ca[0], cb[0]), min(ca[1], cb[1])
    x1, y1 = max(ca[2], cb[2]), max(ca[3], cb[3])
    xs = x0 + (np.arange(cells) + 0.5) * (x1 - x0) / cells
    ys = y0 + (np.arange(cells) + 0.5) * (y1 - y0) / cells
    ax = ((xs >= ca[0]) & (xs < ca[2])); ay = ((ys >= ca[1]) & (ys < ca[3]))
    bx = ((xs >= cb[0]) & (xs < cb[2])); by = ((ys >= cb[1]) & (ys < cb[3]))
    n_a = ax.sum() * ay.sum()
    n_b = bx.sum() * by.sum()
    n_i = (ax & bx).sum() * (ay & by).sum()
    n_u = n_a + n_b - n_i
    total = cells * cells
    return n_i / n_u - (total - n_u) / total


def box_iou(a, b):
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def brute_force_map(detections, scenes, thr=0.5):
    """Recompute the matching from scratch for every score prefix, then take the envelope."""
    counts = {}
    for s in scenes:
        for l in s.gt_labels:
            counts[int(l)] = counts.get(int(l), 0) + 1
    aps = {}
    for c in sorted(counts):
        cands = [(det.score, i, k, det) for i, ds in enumerate(detections)
                 for k, det in enumerate(ds) if det.label == c]
        cands.sort(key=lambda t: (-t[0], t[1], t[2]))
        recalls, precisions = [], []
        for n in range(1, len(cands) + 1):
            used = set()
            tp = 0
            for _, i, _, det in cands[:n]:
                best, best_iou = None, -1.0
                for g, (lab, box) in enumerate(zip(scenes[i].gt_labels, scenes[i].gt_boxes)):
                    if lab != c or (i, g) in used:
                        continue
                    v = box_iou(det.box, box)
                    if v > best_iou:
                        best, best_iou = g, v
                if best is not None and best_iou >= thr:
                    used.add((i, best))
                    tp += 1
            recalls.append(tp / counts[c])
            precisions.append(tp / n)
        ap, prev = 0.0, 0.0
        for n in range(len(cands)):
            ap += (recalls[n] - prev) * max(precisions[n:])
            prev = recalls[n]
        aps[c] = ap
    return float(np.mean(list(aps.values()))) if aps else 0.0, aps


def centralized_training(model, theta0, client, cfg, backbone, batching, rounds):
    """Plain training loop on one client's data with the federation's stream layout.

    Parameters are rounded to 32 bits wherever the federated run sends them.
    """
    from fedprompt.numerics import AdamWState, adamw_step
    from fedprompt.promptgen import quantize
    from fedprompt.training import loss_and_grad

    theta = quantize(theta0)
    opt = AdamWState.zeros(model.size, lr=cfg.lr, weight_decay=cfg.weight_decay)
    for r in range(rounds):
        round_stream = batching.spawn("client", 0, "round", r)
        for e in range(cfg.local_epochs):
            order = round_stream.spawn("epoch", e).permutation(len(client.scenes))
            for k in range(0, len(order), cfg.batch_size):
                scenes = [client.scenes[i] for i in order[k:k + cfg.batch_size]]
                _, g = loss_and_grad(model, theta, backbone, client.T, scenes, client.class_ids)
                theta, opt = adamw_step(opt, theta, g)
        theta = quantize(theta)
    return theta
