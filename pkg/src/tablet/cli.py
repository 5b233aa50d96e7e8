"""Command-line entry point.

    tablet <command> [--config FILE] [--out DIR] [--seed N] [--T N] [--force]
                     [--set section.key=value ...]

Every run writes ``config.snapshot``, ``metrics.csv``, ``run.log``,
``checkpoints/`` and ``plots/`` under ``--out``.  Exit status is 2 for
configuration errors and 1 for runtime failures.  The device comes from the
``TABLET_DEVICE`` environment variable (default ``cpu``).
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch

from . import data as fdata
from .autoencoder import (LosslessAutoencoder, TinyConvAutoencoder, load_external_autoencoder)
from .config import RunConfig, load_config
from .errors import ConfigError, TabletError
from .model import BrainTransformer, ModelConfig, encoder_state, load_checkpoint, save_checkpoint
from .tokenizer import cache_read, cached_tokenize
from .training import TrainConfig, compute_metrics, evaluate, pretrain, sliding_eval, train, window_starts

COMMANDS = ("synth", "tokenize", "pretrain", "train", "finetune", "eval", "recon-report", "attribute",
            "profile", "plot")
NEEDS_SEED = ("train", "pretrain", "finetune")

log = logging.getLogger("tablet")


class RunDir:
    def __init__(self, root: Path, force: bool):
        self.root = root
        self.force = force

    @contextmanager
    def lock(self):
        self.root.mkdir(parents=True, exist_ok=True)
        lock = self.root / ".lock"
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise TabletError(f"{self.root} is locked by another run (remove {lock} if stale)") from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield self
        finally:
            lock.unlink(missing_ok=True)

    def prepare(self, cfg: RunConfig):
        snap = self.root / "config.snapshot"
        if snap.exists() and not self.force:
            raise TabletError(f"{self.root} already holds a run; pass --force to overwrite")
        for sub in ("checkpoints", "plots"):
            (self.root / sub).mkdir(exist_ok=True)
        snap.write_text(cfg.snapshot())

    def write_metrics(self, rows: list[dict]):
        path = self.root / "metrics.csv"
        fields = []
        for row in rows:
            fields.extend(k for k in row if k not in fields)
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _fmt(row.get(k)) for k in fields})
        return path


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _device() -> str:
    return os.environ.get("TABLET_DEVICE", "cpu")


def _setup_logging(out: Path):
    root = logging.getLogger("tablet")
    root.setLevel(logging.INFO)
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(message)s")
    fh = logging.FileHandler(out / "run.log", mode="w")
    fh.setFormatter(fmt)
    sh = logging.StreamHandler(sys.stderr)
    sh.setFormatter(fmt)
    root.addHandler(fh)
    root.addHandler(sh)


# -- shared helpers --------------------------------------------------------------

def _paths(cfg: RunConfig, out: Path) -> tuple[Path, Path]:
    data_dir = Path(cfg["paths"]["data"])
    cache = Path(cfg["paths"]["cache"]) if cfg["paths"]["cache"] else data_dir / "tokens"
    return data_dir, cache


def build_autoencoder(cfg: RunConfig):
    section = cfg["autoencoder"]
    if section["backend"] == "lossless":
        return LosslessAutoencoder()
    if section["backend"] == "external":
        if not section["checkpoint"]:
            raise ConfigError("autoencoder.backend=external needs autoencoder.checkpoint")
        return load_external_autoencoder(section["checkpoint"], section["latent_channels"])
    if section["checkpoint"]:
        return load_external_autoencoder(section["checkpoint"], section["latent_channels"])
    torch.manual_seed(section["init_seed"])
    return TinyConvAutoencoder(section["latent_channels"]).eval()


def model_config(cfg: RunConfig, d_token: int, n_tokens: int) -> ModelConfig:
    m = cfg["model"]
    head = "binary" if cfg["data"]["task_kind"] == "binary-classification" else "regression"
    return ModelConfig(layers=m["layers"], heads=m["heads"], kv_heads=m["kv_heads"], model_dim=m["model_dim"],
                       d_token=d_token, T=cfg["train"]["T"], tokens_per_frame=n_tokens, head_kind=head,
                       mlp_ratio=m["mlp_ratio"], norm_kind=m["norm_kind"], rope=m["rope"])


def train_config(cfg: RunConfig, seed: int, section: str = "train") -> TrainConfig:
    s = cfg[section]
    task = "binary" if cfg["data"]["task_kind"] == "binary-classification" else "regression"
    extra = {"mask_ratio": s["mask_ratio"]} if section == "pretrain" else {
        "pos_weight": s["pos_weight"], "eval_T": s["eval_T"]}
    return TrainConfig(lr=s["lr"], weight_decay=s["weight_decay"], batch_size=s["batch_size"],
                       epochs=s["epochs"], T=s["T"], seed=seed, task_kind=task, **extra)


def list_scans(cfg: RunConfig) -> list[dict]:
    """Scan manifest rows: scan_id, path, label, split."""
    data_dir = Path(cfg["paths"]["data"])
    manifest = data_dir / "manifest.csv"
    if not manifest.exists():
        raise TabletError(f"no manifest at {manifest}; run `tablet synth` or provide one")
    with manifest.open() as fh:
        return list(csv.DictReader(fh))


def load_volume(row: dict, cfg: RunConfig) -> fdata.Volume4D:
    path = Path(row["path"])
    if cfg["data"]["source"] == "nifti":
        raw, spacing = fdata.load_nifti(path)
        return fdata.preprocess_volume(raw, spacing=spacing, scan_id=row["scan_id"])
    vol, _ = fdata.load_scan(path)
    return vol


def tokenized(cfg: RunConfig, rows: list[dict], ae=None) -> tuple[list, list]:
    """Token sequences for ``rows`` plus a per-scan ``"hit"``/``"miss"`` status, reading the cache where valid."""
    _, cache = _paths(cfg, Path("."))
    scheme = cfg["tokenizer"]["scheme"]
    seqs, status = [], []
    for row in rows:
        path = cache / f"{row['scan_id']}.tok"
        if path.exists():
            try:
                seqs.append(cache_read(path))
                status.append("hit")
                continue
            except TabletError:
                log.warning("cache for %s invalid; re-tokenizing", row["scan_id"])
        ae = ae or build_autoencoder(cfg)
        seqs.append(cached_tokenize(load_volume(row, cfg), ae, path, scheme))
        status.append("miss")
    log.info("token cache: %d hits, %d misses", status.count("hit"), status.count("miss"))
    return seqs, status


def _split_rows(rows, split):
    return [r for r in rows if r["split"] == split]


def _targets(rows) -> list[float]:
    return [float(r["label"]) for r in rows]


def _labelled(cfg, rows):
    seqs, _ = tokenized(cfg, rows)
    return [(torch.from_numpy(s.data), y) for s, y in zip(seqs, _targets(rows))]


# -- commands --------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, run: RunDir, args) -> list[dict]:
    d = cfg["data"]
    data_dir = Path(cfg["paths"]["data"])
    data_dir.mkdir(parents=True, exist_ok=True)
    base_seed = args.seed if args.seed is not None else 0
    rows, records = [], []
    for i in range(d["n_scans"]):
        spec = fdata.SynthSpec(T_total=d["T_total"], snr=d["snr"], label_effect=d["label_effect"],
                               seed=base_seed * 100000 + i, task_kind=d["task_kind"], grid=tuple(d["grid"]),
                               scan_id=f"sub-{i:04d}")
        vol, target = fdata.synthesize_scan(spec)
        fdata.save_scan(data_dir / spec.scan_id, vol, target)
        rows.append({"scan_id": spec.scan_id, "path": str(data_dir / spec.scan_id), "label": target.raw_value})
        strat = target.raw_value if d["task_kind"] == "binary-classification" else int(target.raw_value > 0)
        records.append({"scan_id": spec.scan_id, "strat": strat})
    split = fdata.make_split(records, strat_keys=("strat",), seed=d["split_seed"])
    where = {sid: name for name in ("train", "val", "test") for sid in getattr(split, name)}
    for r in rows:
        r["split"] = where[r["scan_id"]]
    with (data_dir / "manifest.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["scan_id", "path", "label", "split"])
        writer.writeheader()
        writer.writerows(rows)
    log.info("wrote %d synthetic scans to %s", len(rows), data_dir)
    return [{"scan_id": r["scan_id"], "label": r["label"], "split": r["split"]} for r in rows]


def cmd_tokenize(cfg, run, args):
    rows = list_scans(cfg)
    seqs, status = tokenized(cfg, rows)
    return [{"scan_id": s.scan_id, "frames": s.data.shape[0], "tokens": s.data.shape[1], "dim": s.data.shape[2],
             "cache": st} for s, st in zip(seqs, status)]


def _new_model(cfg, sample) -> BrainTransformer:
    return BrainTransformer(model_config(cfg, sample.shape[-1], sample.shape[-2]))


def cmd_train(cfg, run, args, init_from: str | None = None):
    rows = list_scans(cfg)
    train_data = _labelled(cfg, _split_rows(rows, "train"))
    val_data = _labelled(cfg, _split_rows(rows, "val"))
    test_data = _labelled(cfg, _split_rows(rows, "test"))
    tcfg = train_config(cfg, args.seed)
    torch.manual_seed(args.seed)
    model = _new_model(cfg, train_data[0][0])
    if init_from:
        pre, _ = load_checkpoint(init_from)
        untouched = model.load_state_dict(encoder_state(pre), strict=False).missing_keys
        log.info("initialized encoder from %s (task head left fresh: %s)", init_from, untouched)
    model, history = train(model, train_data, tcfg, val_data)
    save_checkpoint(run.root / "checkpoints" / "final.pt", model)
    test = evaluate(model, test_data, tcfg.eval_T or tcfg.T, tcfg.task_kind, "test")
    rows_out = [dict(h, split="train") for h in history]
    rows_out.append(dict(test.as_row(), epoch=tcfg.epochs))
    return rows_out


def cmd_finetune(cfg, run, args):
    pretrained = cfg["paths"]["pretrained"]
    if not pretrained:
        raise ConfigError("finetune needs paths.pretrained")
    return cmd_train(cfg, run, args, init_from=pretrained)


def cmd_pretrain(cfg, run, args):
    from .pretrain import MaskedTokenModel

    rows = list_scans(cfg)
    seqs, _ = tokenized(cfg, [r for r in rows if r["split"] != "test"])
    data = [torch.from_numpy(s.data) for s in seqs]
    pcfg = train_config(cfg, args.seed, "pretrain")
    torch.manual_seed(args.seed)
    encoder = _new_model(cfg, data[0])
    mtm = MaskedTokenModel(encoder)
    losses = pretrain(mtm, data, pcfg)
    save_checkpoint(run.root / "checkpoints" / "pretrained.pt", encoder,
                    extra={"mtm_head.weight": mtm.head.weight.detach(), "mtm_head.bias": mtm.head.bias.detach(),
                           "mask_embedding": mtm.mask_embedding.detach()})
    return [{"step": i, "mtm_loss": l} for i, l in enumerate(losses)]


def _load_model(cfg):
    ckpt = cfg["paths"]["checkpoint"]
    if not ckpt:
        raise ConfigError("this command needs paths.checkpoint")
    model, _ = load_checkpoint(ckpt)
    return model.eval()


def cmd_eval(cfg, run, args):
    model = _load_model(cfg)
    rows = list_scans(cfg)
    split = [r for r in rows if r["split"] == "test"] or rows
    seqs, _ = tokenized(cfg, split)
    T = args.T or cfg["train"]["eval_T"] or cfg["train"]["T"]
    preds = []
    out = []
    for row, seq in zip(split, seqs):
        n = len(window_starts(seq.data.shape[0], T))
        log.info("%s: %d frames, %d evaluation windows of T=%d", row["scan_id"], seq.data.shape[0], n, T)
        p = sliding_eval(model, torch.from_numpy(seq.data), T)
        preds.append(p)
        out.append({"scan_id": row["scan_id"], "windows": n, "prediction": p, "label": float(row["label"])})
    task = "binary" if cfg["data"]["task_kind"] == "binary-classification" else "regression"
    if len(preds) >= 2:
        out.append(dict(compute_metrics(preds, _targets(split), task, "test").as_row(), scan_id="_summary"))
    return out


def cmd_recon_report(cfg, run, args):
    from .analysis.recon import block_parcellation, recon_report

    ae = build_autoencoder(cfg)
    out = []
    for row in list_scans(cfg)[: cfg["analysis"]["recon_scans"]]:
        vol = load_volume(row, cfg)
        report = recon_report(vol, ae, block_parcellation(vol.spatial_shape))
        out.append(dict(report.as_row(), scan_id=row["scan_id"]))
        log.info("%s: %s", row["scan_id"], report.as_row())
    return out


def cmd_attribute(cfg, run, args):
    from .analysis.attribution import attribute_frame, average_attribution, select_confident

    model = _load_model(cfg)
    ae = build_autoencoder(cfg)
    a = cfg["analysis"]
    rows = [r for r in list_scans(cfg) if r["split"] == "test"]
    seqs, _ = tokenized(cfg, rows, ae)
    T = cfg["train"]["eval_T"] or cfg["train"]["T"]
    probs = [1.0 / (1.0 + np.exp(-sliding_eval(model, torch.from_numpy(s.data), T))) for s in seqs]
    chosen = select_confident(probs, [int(float(r["label"])) for r in rows], target_class=None,
                              threshold=a["confidence"])[: a["max_subjects"]]
    log.info("%d confidently correct subjects selected", len(chosen))
    maps, out = [], []
    for i in chosen:
        frame = load_volume(rows[i], cfg).data[0]
        amap = attribute_frame(model, ae, frame, steps=a["ig_steps"])
        maps.append(amap)
        out.append({"scan_id": rows[i]["scan_id"], "probability": float(probs[i]), "completeness_gap": amap.residual})
    if maps:
        fdata.save_nifti(run.root / "plots" / "attribution.nii.gz", average_attribution(maps))
    return out


def _profile_builder(T, d_token=3072, n_tokens=27, layers=2, heads=4, kv_heads=2, model_dim=64):
    return BrainTransformer(ModelConfig(layers=layers, heads=heads, kv_heads=kv_heads, model_dim=model_dim,
                                        d_token=d_token, T=T, tokens_per_frame=n_tokens, mlp_ratio=2.0))


def cmd_profile(cfg, run, args):
    from functools import partial

    from .analysis.profiler import plot_profile, profile, write_profile_csv

    m = cfg["model"]
    builder = partial(_profile_builder, layers=m["layers"], heads=m["heads"], kv_heads=m["kv_heads"],
                      model_dim=m["model_dim"])
    a = cfg["analysis"]
    records = profile(builder, a["profile_T"], a["profile_batch"], a["profile_steps"], _device())
    write_profile_csv(records, run.root / "plots" / "profile.csv")
    plot_profile(records, run.root / "plots" / "profile.png")
    return [vars(r) for r in records]


def cmd_plot(cfg, run, args):
    from .analysis.profiler import plot_profile, read_profile_csv

    src = cfg["paths"]["profile_csv"]
    if not src:
        raise ConfigError("plot needs paths.profile_csv")
    records = read_profile_csv(src)
    meta = plot_profile(records, run.root / "plots" / "profile.png")
    return [{"panel": p["title"], "points": p["n_points"]} for p in meta["panels"]]


HANDLERS = {
    "synth": cmd_synth, "tokenize": cmd_tokenize, "pretrain": cmd_pretrain, "train": cmd_train,
    "finetune": cmd_finetune, "eval": cmd_eval, "recon-report": cmd_recon_report, "attribute": cmd_attribute,
    "profile": cmd_profile, "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tablet", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="INI config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--T", type=int, help="frames per window (overrides train.T / eval window)")
    p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    overrides = list(args.set)
    if args.T is not None and args.command != "eval":
        overrides.append(f"train.T={args.T}")
    try:
        if args.command in NEEDS_SEED and args.seed is None:
            raise ConfigError(f"--seed is required for {args.command}")
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    run = RunDir(Path(args.out), args.force)
    try:
        with run.lock():
            run.prepare(cfg)
            _setup_logging(run.root)
            if args.seed is not None:
                torch.manual_seed(args.seed)
                np.random.seed(args.seed)
            rows = HANDLERS[args.command](cfg, run, args)
            run.write_metrics(rows or [])
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TabletError as exc:
        log.error("run failed: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # surfaced as exit 1 with the message
        log.exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
