"""Teacher, then student, on a small synthetic problem.

Pre-trains a teacher on the strong clips, then trains a compact student with
and without the two distillation losses and compares validation scores. The
same steps are available on the command line as ``pretrain-teacher`` and
``train``. Takes two to three minutes on one core.
"""

import tempfile
import time
from pathlib import Path

from dualkd.checkpoint import parameter_hash
from dualkd.features import FeatureConfig
from dualkd.synth import ClipStore, Manifest, MockEmbeddingProvider, generate_dataset
from dualkd.training import TrainConfig, train_loop

root = Path(tempfile.mkdtemp(prefix="dualkd_run_"))
fc = FeatureConfig(n_mels=64)
generate_dataset(root / "train", 5, {"strong": 20, "weak": 20, "unlabeled": 160}, seed=1, duration=2.0,
                 feature_config=fc)
generate_dataset(root / "val", 5, {"strong": 40}, seed=1001, duration=2.0, feature_config=fc, prefix="val")
train = ClipStore(Manifest.load(root / "train"), MockEmbeddingProvider(fc.n_mels))
val = ClipStore(Manifest.load(root / "val"))

common = dict(student="SE-CRNN-tiny", lr=3e-3, dropout=0.2)

t0 = time.time()
teacher_cfg = TrainConfig(mode="supervised_only", batch_size=8, batch_composition=(8, 0, 0), epochs=100,
                          ramp_epochs=1, seed=100, **common)
teacher = train_loop(teacher_cfg, train, root / "teacher", val).student
print(f"teacher ready in {time.time() - t0:.0f}s")
frozen = parameter_hash(teacher)

for mode in ("supervised_only", "TAKD", "TAKD+EEFD"):
    cfg = TrainConfig(mode=mode, batch_size=16, batch_composition=(4, 4, 8), epochs=10, ramp_epochs=2,
                      ema_alpha=0.9, seed=0, **common)
    art = train_loop(cfg, train, root / mode, val, teacher=None if mode == "supervised_only" else teacher)
    last = art.history[-1]
    print(f"{mode:<16} segment F1 {last['val_segment_f1']:.3f}  event F1 {last['val_event_f1']:.3f}  "
          f"psds_lite {last['psds_lite']:.3f}")

print("teacher untouched:", parameter_hash(teacher) == frozen)
print("metrics and checkpoints under", root)
