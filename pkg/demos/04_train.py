"""Train a small attention U-Net on synthetic wounds and evaluate it."""
from pucare.data_io import SyntheticSpec, generate_synthetic
from pucare.model import ModelConfig, init_params
from pucare.training import SplitSpec, TrainConfig, evaluate_model, fit, split_dataset

ds = generate_synthetic(SyntheticSpec(n=20, size=32, seed=0))
train, val, test = split_dataset(ds, SplitSpec(seed=0))
model_cfg = ModelConfig(input_size=32, levels=2, base_channels=8)
params, history = fit(train, val, init_params(model_cfg), model_cfg, TrainConfig(epochs=15, seed=0))

for r in history.epochs[::3]:
    print(f"epoch {r.epoch + 1:2d}  loss {r.train_loss:.4f}  val DSC {r.val_dsc:.3f}")
result = evaluate_model(test, params, model_cfg)
print(f"test  acc {result.macro.acc:.3f}  IoU {result.macro.iou:.3f}  DSC {result.macro.dsc:.3f}")
