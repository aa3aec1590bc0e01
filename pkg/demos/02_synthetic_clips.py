"""From tone bursts to decoded events.

Generates a tiny labelled dataset, looks at one clip's log-mel features and
frame labels, then pretends the labels are predictions and scores them.
"""

import tempfile
from pathlib import Path

import numpy as np

from dualkd.features import FeatureConfig
from dualkd.metrics import decode, event_f1, psds_lite, segment_f1
from dualkd.synth import ClipStore, Manifest, MockEmbeddingProvider, generate_dataset

root = Path(tempfile.mkdtemp(prefix="dualkd_demo_"))
cfg = FeatureConfig(n_mels=64)
generate_dataset(root, 5, {"strong": 4, "weak": 2, "unlabeled": 2}, seed=7, duration=4.0, feature_config=cfg)
manifest = Manifest.load(root)
store = ClipStore(manifest, MockEmbeddingProvider(cfg.n_mels))
print("dataset at", root, manifest.counts())

rec = manifest.by_split("strong")[0]
feats, labels = store.features[rec.id], store.frame_y[rec.id]
print(f"{rec.id}: features {feats.shape}, {cfg.frame_seconds * 1000:.0f} ms per frame")
for k, on, off in rec.events:
    print(f"  {manifest.class_names[k]:<8} {on:5.2f}-{off:5.2f} s")

# The mock embedding has half the frame rate of the features.
print("embedding", store.embeddings[rec.id].shape)

# Ideal predictions decode back to the annotated events, up to one hop of rounding.
# Overlapping events of the same class merge into one run, which costs event F1 but not segment F1.
events = decode(labels, frame_seconds=cfg.frame_seconds, duration=rec.duration)
pred = [(k, on, off) for k, on, off, _ in events]
truth = [tuple(e) for e in rec.events]
print("decoded:", [(manifest.class_names[k], round(on, 2), round(off, 2)) for k, on, off in pred])
print("segment F1", segment_f1(pred, truth, duration=rec.duration))
print("event F1  ", event_f1(pred, truth))

# Blurred, noisy predictions make the threshold sweep meaningful.
rng = np.random.default_rng(0)
soft = np.clip(0.15 + 0.7 * labels + rng.normal(0, 0.15, labels.shape), 0, 1)
print("psds_lite on noisy scores", round(psds_lite({rec.id: soft}, {rec.id: truth}, frame_seconds=cfg.frame_seconds,
                                                     duration=rec.duration), 3))
