"""Pretrain on the source domain, fine-tune on the target, and compare with training from scratch."""
from pucare.data_io import SyntheticSpec, generate_synthetic
from pucare.model import ModelConfig, init_params
from pucare.training import TrainConfig, epochs_to_reach, fit, pretrain_finetune

source = generate_synthetic(SyntheticSpec(n=48, domain="source", size=32, seed=10))
target = generate_synthetic(SyntheticSpec(n=16, domain="target", size=32, seed=11))
train, val = target.subset(target.ids[:8]), target.subset(target.ids[8:])
model_cfg = ModelConfig(input_size=32, levels=2, base_channels=8)
cfg = TrainConfig(epochs=12)

_, (_, fine) = pretrain_finetune(source, train, TrainConfig(epochs=12), cfg, model_cfg, target_val=val)
_, scratch = fit(train, val, init_params(model_cfg), model_cfg, cfg)

print("epoch  pretrained  scratch")
for a, b in zip(fine.epochs, scratch.epochs):
    print(f"{a.epoch + 1:5d}  {a.val_dsc:10.3f}  {b.val_dsc:7.3f}")
print("epochs to DSC 0.8:", epochs_to_reach(fine, 0.8), "vs", epochs_to_reach(scratch, 0.8))
