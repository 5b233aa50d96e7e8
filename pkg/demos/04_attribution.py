"""
Voxel attributions through the whole pipeline
=============================================

Integrated gradients flow from the classifier logit back through the
transformer and the autoencoder encoder into the 96^3 input frame.
"""
import torch

from tablet import BrainTransformer, ModelConfig, SynthSpec, TinyConvAutoencoder, synthesize_scan
from tablet.analysis.attribution import attribute_frame

torch.manual_seed(0)
ae = TinyConvAutoencoder(32).eval()
model = BrainTransformer(ModelConfig(layers=2, heads=2, kv_heads=1, model_dim=16, d_token=3072, T=1,
                                     tokens_per_frame=27))
torch.nn.init.normal_(model.head.weight, std=0.5)  # an untrained head is all zeros

vol, _ = synthesize_scan(SynthSpec(T_total=1, seed=3, grid=(40, 40, 40)))
amap = attribute_frame(model, ae, vol.data[0], steps=64, batch_size=8)
attr = amap.data
print("attribution", attr.shape, "sum %.4f" % attr.sum())
print("completeness gap relative to f(x)-f(baseline): %.1e" % amap.relative_residual)
