"""
Cost of longer windows
======================

Each window length runs in its own process so the memory high-water mark
belongs to that configuration alone.
"""
from tablet import BrainTransformer, ModelConfig
from tablet.analysis.profiler import plot_profile, profile


def build(T):
    return BrainTransformer(ModelConfig(layers=2, heads=4, kv_heads=2, model_dim=64, d_token=3072, T=T,
                                        tokens_per_frame=27))


if __name__ == "__main__":
    records = profile(build, [4, 16, 64], batch_size=2, steps=2, model_tag="desk")
    for r in records:
        print(f"T={r.T:>3}  peak {r.peak_memory_bytes / 2**30:.2f} GB  {r.seconds_per_step:.2f} s/step")
    print(plot_profile(records, "profile.png")["path"])
