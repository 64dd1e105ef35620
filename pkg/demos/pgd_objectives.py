"""
Inner objectives for the adversarial example
============================================

Trains a small clean detector, picks one object per image and runs PGD
inside its box with each inner objective. CLM and FLM push the plain
detection loss up. SBM pushes the detector towards whichever backdoor
behaviour (relabelling or disappearance) is closer. The printout shows
how each one moves the target object's scores.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from backdoor_forge.advgen import PerturbationSpec, pgd_batch
from backdoor_forge.attack import SceneSpec, gen_dataset
from backdoor_forge.data import to_tensor
from backdoor_forge.detector import TinyDetector, TrainConfig, assign, detect, predict, train_detector
from backdoor_forge.margins import SurrogateConfig, summarize_scores

torch.manual_seed(0)
train = gen_dataset(200, SceneSpec(seed=0))
test = gen_dataset(16, SceneSpec(seed=1))
model = train_detector(TinyDetector(), train, TrainConfig(epochs=30))
model.eval()

x = to_tensor(test.images)
i_stars = [0] * len(test)
surrogate = SurrogateConfig()


def target_scores(images):
    # mean true-class and best other-class score over the predictions matched to each target
    preds = predict(model, images)
    s_gt, s_oth = [], []
    for k, gt in enumerate(test.targets):
        pi = assign(preds.boxes[k], gt)
        j = np.flatnonzero(pi == i_stars[k])
        summ = summarize_scores(preds.scores[k, j], torch.full((len(j),), int(gt.labels[i_stars[k]])))
        s_gt.append(float(summ.s_gt.mean()))
        s_oth.append(float(summ.s_oth.mean()))
    return np.mean(s_gt), np.mean(s_oth)


print("clean   s_gt=%.3f s_oth=%.3f" % target_scores(x))
adv_images = {}
for objective in ("clm", "flm", "sbm"):
    spec = PerturbationSpec(epsilon=8 / 255, steps=30, step_size=2 / 255, objective=objective)
    advs = pgd_batch(model, x, test.targets, i_stars, spec, surrogate)
    x_adv = torch.stack([a.x_prime for a in advs])
    adv_images[objective] = x_adv
    print(f"{objective:7s} s_gt=%.3f s_oth=%.3f" % target_scores(x_adv))

# one example image with its detections under each perturbation
k = 3
fig, axes = plt.subplots(1, 4, figsize=(12, 3.4))
for ax, (name, imgs) in zip(axes, [("clean", x)] + list(adv_images.items())):
    img = imgs[k].permute(1, 2, 0).numpy()
    ax.imshow(img, interpolation="nearest")
    for d in detect(model, (imgs[k:k + 1].permute(0, 2, 3, 1).numpy() * 255).round().astype(np.uint8))[0]:
        x1, y1, x2, y2 = d.box
        ax.add_patch(plt.Rectangle((x1, y1), x2 - x1, y2 - y1, fill=False, color="white", lw=1))
        ax.text(x1, y1 - 1, f"{d.class_id}:{d.score:.2f}", color="white", fontsize=7)
    b = test.targets[k].boxes[i_stars[k]]
    ax.add_patch(plt.Rectangle((b[0], b[1]), b[2] - b[0], b[3] - b[1], fill=False, color="black", ls="--", lw=1))
    ax.set_title(name)
    ax.axis("off")
fig.tight_layout()
fig.savefig("pgd_objectives.png", dpi=120)
print("wrote pgd_objectives.png")
