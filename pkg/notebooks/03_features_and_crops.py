# %% [markdown]
# Class separation of pooled features, and how test accuracy of a plain
# network responds when the background is masked away.

# %%
from causal_sar import SyntheticSpec, TrainConfig, center_crop_mask, discriminability, evaluate, generate_synthetic, train
from causal_sar.metrics import export_embeddings, pooled_features

data = generate_synthetic(SyntheticSpec(n_train=125, n_test=125, rho=0.95, rho_test=0.0), seed=1)
test_set = data.split("test")
model = train(TrainConfig(lam=0.1, epochs=10, seed=1), data.split("train")).model

# %%
for space in ("baseline", "interventional"):
    feats = pooled_features(model, test_set, space)
    print(space, discriminability(feats, test_set.labels).to_dict())

# 2-D PCA projection for plotting elsewhere
export_embeddings(pooled_features(model, test_set, "interventional"), test_set.labels, "embeddings.csv")

# %%
# a model trained on the full frame, evaluated with more and more background hidden
base = train(TrainConfig(lam=0.0, epochs=10, seed=1), data.split("train"), use_sam=False).model
for crop in (8, 16, 24, 32):
    masked = test_set.with_images(center_crop_mask(test_set.images, crop))
    print(f"crop {crop:2d}: {evaluate(base, masked, 'baseline').accuracy:.2f}%")
