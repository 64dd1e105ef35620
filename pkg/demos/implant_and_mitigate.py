"""
Implant a backdoor, then remove it
==================================

The full loop at default settings: a clean reference detector, an RMA
backdoor planted through 5% poisoned training images, and two repairs
that each see only a 5% clean subset. One is plain fine-tuning, the
other is the adversarial fine-tuning with SBM examples, FWS target
selection and the defence loss. Takes several minutes on one CPU.

Pass ``oda`` as the first argument for the disappearance backdoor.
"""

import sys
import time

from backdoor_forge import pipeline
from backdoor_forge.config import RunConfig
from backdoor_forge.errors import ImplantError

mode = sys.argv[1] if len(sys.argv) > 1 else "rma"
cfg = RunConfig({"seed": 0})
splits = pipeline.generate(cfg)
print(f"{len(splits.train)} training and {len(splits.test)} test scenes")

t0 = time.time()
clean, ref_map = pipeline.train_clean(cfg, splits)
print(f"clean reference mAP@0.5 {ref_map:.3f} ({time.time() - t0:.0f}s)")

t0 = time.time()
try:
    backdoored, _, report = pipeline.implant(cfg, splits, mode, ref_map)
except ImplantError as exc:
    # the gate refuses to hand over a model without a working backdoor
    print("implant rejected:", exc, exc.report)
    sys.exit(1)
print(f"backdoored: ASR {report['asr']:.3f}, clean mAP {report['map50_clean']:.3f} ({time.time() - t0:.0f}s)")

# the clean reference is not fooled by the trigger
print("clean model on triggered set:", pipeline.assess(cfg, clean, splits.test, mode, ref_map).asr)

subset = pipeline.clean_subset(splits.train, cfg["defense"]["subset_fraction"], seed=0)
print(f"defender holds {len(subset)} clean images")
for method in ("ft", "sbm"):
    t0 = time.time()
    repaired = pipeline.run_defense(cfg, backdoored, subset, method, "fws", True, seed=0)
    rep = pipeline.assess(cfg, repaired, splits.test, mode, report["map50_clean"])
    tdr = f", TDR {rep.tdr:.3f}" if rep.tdr is not None else ""
    print(f"{method:4s} ASR {rep.asr:.3f}{tdr}, RmAP {rep.rmap:.3f} ({time.time() - t0:.0f}s)")
