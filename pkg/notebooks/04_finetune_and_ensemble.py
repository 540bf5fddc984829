# %% [markdown]
# # Cross-task fusion fine-tuning and late fusion
#
# A trained inter-connected MTL model is frozen; each branch's class maps go
# through a new dense layer, the two are summed and a new output layer is
# trained on the original single-task data.  Several such classifiers are
# then combined by summing their scores.

# %%
import tempfile

from soundmtl.datasets import FoldPlan, SyntheticSpec, generate_synthetic_corpus, samples_from_manifest
from soundmtl.ensemble import EnsembleSpec, ScoreMatrix, fuse_and_score, subsample_ensembles
from soundmtl.features import FeatureOptions, extract_dataset
from soundmtl.training import TrainConfig, evaluate, prepare_fold, train_two_stage

root = tempfile.mkdtemp()
sm, em = generate_synthetic_corpus(SyntheticSpec(recordings_per_class=16), root)
s_imgs, s_man = extract_dataset(sm, FeatureOptions.desk_scale("triple"), root)
e_imgs, e_man = extract_dataset(em, FeatureOptions.desk_scale("mono"), root)
fd = prepare_fold(samples_from_manifest(s_imgs, s_man), samples_from_manifest(e_imgs, e_man),
                  FoldPlan.from_manifest(s_man), FoldPlan.from_manifest(e_man), 0)

# %%
cfg = TrainConfig.desk_scale()
scores = []
for seed in range(3):
    mtl, fused, acc, unchanged = train_two_stage(fd, cfg, seed, finetune_tasks=("ASC",))
    print(seed, acc, "frozen layers unchanged:", unchanged)
    res = evaluate(fused["ASC"], fd.scene_val, "ASC")
    scores.append(ScoreMatrix(f"triple_r{seed}_f0", [s.key for s in fd.scene_val], res.probs))

# %%
truth = {s.recording_id: int(s.scene_label.argmax()) for s in fd.scene_val}
report = fuse_and_score(scores, truth)
print("fused recording accuracy", report["recording_accuracy"])
print(report["confusion"])

# %% [markdown]
# At full scale the pool is 4 folds x 3 repeats x 2 variant schemes.  The
# 8-classifier sub-ensembles take, for each scheme, the four folds of one
# repeat.

# %%
combos = subsample_ensembles(EnsembleSpec.grid(), 8, "repeat-blocks").combinations
print(len(combos), "combinations; first:", combos[0])
