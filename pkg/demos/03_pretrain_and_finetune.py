"""
Masked token pretraining, then fine-tuning
==========================================

Hide half of the token positions (the same ones in every frame), ask the
encoder to fill them in, then reuse the encoder for classification.
"""
import torch

from tablet import BrainTransformer, MaskedTokenModel, ModelConfig, SynthSpec, TinyConvAutoencoder, TrainConfig
from tablet import synthesize_scan, tokenize_sequence, train
from tablet.model import encoder_state
from tablet.training import evaluate, pretrain

torch.manual_seed(0)
ae = TinyConvAutoencoder(32).eval()
data = []
for i in range(16):
    vol, tgt = synthesize_scan(SynthSpec(T_total=8, seed=i, grid=(48, 48, 48), label=i % 2, label_effect=3.0))
    data.append((torch.from_numpy(tokenize_sequence(vol, ae).data), tgt.raw_value))
train_set, val_set = data[:12], data[12:]

cfg = ModelConfig(layers=2, heads=4, kv_heads=2, model_dim=64, d_token=3072, T=4, tokens_per_frame=27)
torch.manual_seed(0)
encoder = BrainTransformer(cfg)
losses = pretrain(MaskedTokenModel(encoder), [s for s, _ in train_set],
                  TrainConfig(lr=1e-3, epochs=10, T=4, batch_size=4, mask_ratio=0.5))
print("masked-token L1: %.3f -> %.3f" % (losses[0], losses[-1]))

model = BrainTransformer(cfg)
missing = model.load_state_dict(encoder_state(encoder), strict=False)
print("fresh after transfer:", missing.missing_keys)
model, hist = train(model, train_set, TrainConfig(lr=1e-3, epochs=5, T=4, batch_size=4), val_set)
print(evaluate(model, val_set, 4, "binary", "val"))
