"""Event decoding and desk-scale detection metrics.

Event lists map a clip id to ``[(class_index, onset_s, offset_s, score), ...]``;
truth lists may omit the score.  Counts are pooled over clips per class and
then macro-averaged over the classes that occur in either list.

``psds_lite`` is a simplified threshold sweep (intersection-based TPR,
normalised area); its values are not comparable with DCASE PSDS scores.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.signal import medfilt

from .errors import UsageError

DEFAULT_THRESHOLD = 0.5
DEFAULT_MEDIAN = 7
DEFAULT_SEGMENT = 1.0
DEFAULT_COLLAR = 0.2
DEFAULT_SWEEP = tuple(np.round(np.linspace(0.1, 0.9, 9), 2))


def decode(frame_probs, threshold=DEFAULT_THRESHOLD, median_len=DEFAULT_MEDIAN, frame_seconds=256 / 16000,
           duration=None):
    """Binarize, median-filter and merge runs of active frames into events."""
    probs = np.asarray(frame_probs, dtype=np.float64)
    if probs.ndim != 2:
        raise UsageError(f"frame_probs must be [T, K], got {probs.shape}")
    if not 0.0 < threshold < 1.0:
        raise UsageError(f"threshold {threshold} outside (0, 1)")
    if median_len < 1 or median_len % 2 == 0:
        raise UsageError(f"median_len must be odd and positive, got {median_len}")
    events = []
    for k in range(probs.shape[1]):
        active = (probs[:, k] > threshold).astype(np.float64)
        if median_len > 1:
            active = medfilt(active, median_len)
        padded = np.concatenate([[0.0], active, [0.0]])
        edges = np.flatnonzero(np.diff(padded))
        for a, b in zip(edges[::2], edges[1::2]):
            on, off = a * frame_seconds, b * frame_seconds
            if duration is not None:
                off = min(off, duration)
            if off > on:
                events.append((k, float(on), float(off), float(probs[a:b, k].mean())))
    events.sort(key=lambda e: (e[1], e[0]))
    return events


def _as_clips(events):
    return events if isinstance(events, dict) else {"_": events}


def _macro_f1(counts):
    f1s = {}
    for k, (tp, fp, fn) in counts.items():
        if tp + fp + fn > 0:
            f1s[k] = 2 * tp / (2 * tp + fp + fn)
    return (float(np.mean(list(f1s.values()))) if f1s else 1.0), f1s


def segment_counts(pred, truth, segment_s=DEFAULT_SEGMENT, duration=10.0):
    pred, truth = _as_clips(pred), _as_clips(truth)
    counts = {}
    for cid in sorted(set(pred) | set(truth)):
        dur = duration[cid] if isinstance(duration, dict) else duration
        n = int(math.ceil(dur / segment_s - 1e-9))
        starts = np.arange(n) * segment_s
        ends = np.minimum(starts + segment_s, dur)

        def activity(events):
            act = {}
            for e in events:
                k, on, off = int(e[0]), e[1], e[2]
                a = act.setdefault(k, np.zeros(n, bool))
                a |= (on < ends) & (off > starts)
            return act

        p, t = activity(pred.get(cid, [])), activity(truth.get(cid, []))
        for k in set(p) | set(t):
            pk, tk = p.get(k, np.zeros(n, bool)), t.get(k, np.zeros(n, bool))
            c = counts.setdefault(k, [0, 0, 0])
            c[0] += int(np.sum(pk & tk))
            c[1] += int(np.sum(pk & ~tk))
            c[2] += int(np.sum(~pk & tk))
    return counts


def segment_f1(pred, truth, segment_s=DEFAULT_SEGMENT, duration=10.0, per_class=False):
    """Macro F1 over fixed segments; a class is active in a segment on any overlap."""
    macro, f1s = _macro_f1(segment_counts(pred, truth, segment_s, duration))
    return (macro, f1s) if per_class else macro


def _event_match(p, t, collar):
    off_tol = max(collar, 0.2 * (t[2] - t[1]))
    return abs(p[1] - t[1]) <= collar and abs(p[2] - t[2]) <= off_tol


def event_counts(pred, truth, collar=DEFAULT_COLLAR):
    if collar <= 0:
        raise UsageError("collar must be positive")
    pred, truth = _as_clips(pred), _as_clips(truth)
    counts = {}
    for cid in sorted(set(pred) | set(truth)):
        classes = {int(e[0]) for e in pred.get(cid, [])} | {int(e[0]) for e in truth.get(cid, [])}
        for k in classes:
            ps = sorted((e for e in pred.get(cid, []) if int(e[0]) == k), key=lambda e: e[1])
            ts = sorted((e for e in truth.get(cid, []) if int(e[0]) == k), key=lambda e: e[1])
            used = [False] * len(ps)
            tp = 0
            for t in ts:
                best, best_d = None, None
                for i, p in enumerate(ps):
                    if not used[i] and _event_match(p, t, collar):
                        d = abs(p[1] - t[1])
                        if best is None or d < best_d:
                            best, best_d = i, d
                if best is not None:
                    used[best] = True
                    tp += 1
            c = counts.setdefault(k, [0, 0, 0])
            c[0] += tp
            c[1] += len(ps) - tp
            c[2] += len(ts) - tp
    return counts


def event_f1(pred, truth, collar=DEFAULT_COLLAR, per_class=False):
    """Macro F1 with greedy one-to-one onset/offset collar matching."""
    macro, f1s = _macro_f1(event_counts(pred, truth, collar))
    return (macro, f1s) if per_class else macro


def _overlap(a, b):
    return max(0.0, min(a[2], b[2]) - max(a[1], b[1]))


def intersection_tpr(pred, truth, dtc=0.5, gtc=0.5):
    """Macro fraction of truth events covered by valid detections.

    A detection is valid when at least ``dtc`` of it overlaps truth of its
    class; a truth event counts as found when valid detections cover at least
    ``gtc`` of it.
    """
    pred, truth = _as_clips(pred), _as_clips(truth)
    found, total = {}, {}
    for cid, ts in truth.items():
        ps = pred.get(cid, [])
        for t in ts:
            k = int(t[0])
            total[k] = total.get(k, 0) + 1
            same = [p for p in ps if int(p[0]) == k]
            valid = [p for p in same
                     if sum(_overlap(p, u) for u in ts if int(u[0]) == k) >= dtc * (p[2] - p[1])]
            covered = sum(_overlap(p, t) for p in valid)
            if covered >= gtc * (t[2] - t[1]) - 1e-12:
                found[k] = found.get(k, 0) + 1
    if not total:
        return 0.0
    return float(np.mean([found.get(k, 0) / n for k, n in total.items()]))


def psds_lite(frame_probs, truth, thresholds=DEFAULT_SWEEP, median_len=DEFAULT_MEDIAN,
              frame_seconds=256 / 16000, duration=None):
    """Normalised area under the macro intersection-TPR vs threshold curve."""
    th = np.unique(np.asarray(thresholds, dtype=np.float64))
    if th.size < 2:
        raise UsageError("psds_lite needs at least two distinct thresholds")
    probs = _as_clips(frame_probs)
    truth = _as_clips(truth)
    tpr = []
    for t in th:
        pred = {}
        for cid, p in probs.items():
            dur = duration[cid] if isinstance(duration, dict) else duration
            pred[cid] = decode(p, t, median_len, frame_seconds, dur)
        tpr.append(intersection_tpr(pred, truth))
    tpr = np.asarray(tpr)
    area = np.sum((tpr[1:] + tpr[:-1]) * np.diff(th)) / 2
    return float(area / (th[-1] - th[0]))


def predict_frames(model, store, ids, batch_size=16):
    """Eval-mode frame probabilities for ``ids``, as a dict of ``[T, K]`` arrays."""
    from .autodiff import no_grad

    out = {}
    with no_grad():
        for i in range(0, len(ids), batch_size):
            chunk = ids[i : i + batch_size]
            x = np.stack([store.features[c] for c in chunk])[:, None].astype(model.dtype)
            probs = model.forward(x, "eval").frame_probs.data
            for c, p in zip(chunk, probs):
                out[c] = p
    return out


def evaluate_model(model, store, threshold=DEFAULT_THRESHOLD, median_len=DEFAULT_MEDIAN,
                   segment_s=DEFAULT_SEGMENT, collar=DEFAULT_COLLAR, thresholds=DEFAULT_SWEEP,
                   max_clips=None) -> dict:
    """Metrics report for ``model`` on every clip of ``store`` that has ground truth."""
    manifest = store.manifest
    records = [r for r in manifest.records if manifest.truth_events(r)]
    if max_clips:
        records = records[:max_clips]
    ids = [r.id for r in records]
    fs = store.cfg.frame_seconds
    probs = predict_frames(model, store, ids)
    durations = {r.id: r.duration for r in records}
    truth = {r.id: [tuple(e) for e in manifest.truth_events(r)] for r in records}
    pred = {c: decode(probs[c], threshold, median_len, fs, durations[c]) for c in ids}
    seg, seg_k = segment_f1(pred, truth, segment_s, durations, per_class=True)
    evt, evt_k = event_f1(pred, truth, collar, per_class=True)
    psds = psds_lite(probs, truth, thresholds, median_len, fs, durations)
    names = manifest.class_names
    return {
        "segment_f1": seg,
        "event_f1": evt,
        "psds_lite": psds,
        "n_clips": len(ids),
        "per_class": {
            names[k]: {"segment_f1": seg_k.get(k), "event_f1": evt_k.get(k)} for k in range(len(names))
        },
        "settings": {"threshold": threshold, "median_len": median_len, "segment_s": segment_s,
                     "collar": collar, "thresholds": [float(t) for t in thresholds]},
    }
