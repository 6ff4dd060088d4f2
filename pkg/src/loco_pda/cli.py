"""Command-line frontend.

Every subcommand takes --config/--seed/--out, reads its inputs from the
output directory by well-known names, writes its artifacts plus a run
manifest (command, config hash, seed, artifact sha256 checksums), and exits
with a category-specific code on failure. Given the same config and seed,
every command writes byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import adaptation, cvae, evaluation, formats, models
from .adaptation import ClassDistribution, LabelMode, Scenario
from .config import PipelineConfig, config_hash, load_config, render_config
from .errors import (
    ChecksumError,
    ConfigError,
    FormatError,
    LabelError,
    LocoError,
    MissingInputError,
    NumericError,
)

# artifact names inside the output directory
DATA_TRAIN = "data_train.lpac"
DATA_VAL = "data_val.lpac"
TARGET_STREAM = "target_stream.lpac"
MODEL_M0 = "m0.lpmd"
MODEL_MP = "mp.lpmd"
ACTS_TRAIN = "acts_train.lpac"
CVAE_ENC = "cvae_enc.lpmd"
CVAE_DEC = "cvae_dec.lpmd"
SOURCE_LOG = "source_log.json"
CVAE_LOG = "cvae_log.json"
UNCOND_LOG = "uncond_log.json"
DOMAIN = "domain.json"
ADAPTED = "adapted.lpmd"
ADAPT_REPORT = "adapt_report.json"
BASELINE_MODEL = "baseline.lpmd"
BASELINE_REPORT = "baseline_report.json"
EVALUATION = "evaluation.json"
SWEEP_CSV = "budget_sweep.csv"
SWEEP_JSON = "budget_sweep.json"
UNCOND_COMPARE = "uncond_compare.json"
MEMORY = "memory.json"
MATRIX = "matrix.json"

EXIT_INTERNAL = 1
# argparse exits with 2 on usage errors; category codes start above it
EXIT_CONFIG = 3
EXIT_FORMAT = 4
EXIT_CHECKSUM = 5
EXIT_NUMERIC = 6
EXIT_MISSING = 7
EXIT_INVALID = 8


def uncond_enc_name(c: int) -> str:
    return f"uncond_enc_{c:03d}.lpmd"


def uncond_dec_name(c: int) -> str:
    return f"uncond_dec_{c:03d}.lpmd"


class Context:
    def __init__(self, cfg: PipelineConfig, seed: int, out: Path):
        self.cfg = cfg
        self.seed = seed
        self.out = out
        self.cfg_hash = config_hash(cfg)

    def path(self, name: str) -> Path:
        return self.out / name

    def require(self, name: str, producer: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingInputError(
                f"{name} not found in {self.out}; run `loco-pda {producer}` first"
            )
        return p


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_manifest(ctx: Context, command: str, artifacts: list[str]) -> None:
    manifest = {
        "command": command,
        "config_hash": ctx.cfg_hash,
        "seed": ctx.seed,
        "artifacts": {name: _sha256(ctx.path(name)) for name in sorted(artifacts)},
    }
    _write_json(ctx.path(f"manifest_{command}.json"), manifest)


def _load_dataset(ctx: Context) -> models.LabeledDataset:
    train = formats.load_activations(ctx.require(DATA_TRAIN, "synth-data"))
    val = formats.load_activations(ctx.require(DATA_VAL, "synth-data"))
    if train.labels is None or val.labels is None:
        raise FormatError("dataset files must carry labels")
    spec = ctx.cfg.dataset_spec(ctx.seed)
    return models.LabeledDataset(spec, train.features, train.labels,
                                 val.features, val.labels,
                                 models.class_means_for(spec))


def _load_m0(ctx: Context) -> models.MlpModel:
    return formats.load_mlp(ctx.require(MODEL_M0, "train-source"))


def _load_mp(ctx: Context) -> models.MlpModel:
    return formats.load_mlp(ctx.require(MODEL_MP, "prune"))


def _load_cvae(ctx: Context) -> cvae.CvaeModel:
    enc = ctx.require(CVAE_ENC, "train-cvae")
    dec = ctx.require(CVAE_DEC, "train-cvae")
    return formats.load_cvae(enc, dec)


def _load_pack(ctx: Context) -> cvae.UncondVaePack:
    vaes = []
    for c in range(ctx.cfg.classes):
        enc = ctx.require(uncond_enc_name(c), "train-uncond")
        dec = ctx.require(uncond_dec_name(c), "train-uncond")
        vaes.append(formats.load_cvae(enc, dec))
    return cvae.UncondVaePack(vaes)


def _load_stream(ctx: Context, stream_arg: str | None) -> models.ActivationBatch:
    if stream_arg is not None:
        p = Path(stream_arg)
        if not p.exists():
            raise MissingInputError(f"stream file {p} does not exist")
        return formats.load_activations(p)
    return formats.load_activations(ctx.require(TARGET_STREAM, "synth-data"))


def _val_subset(ctx: Context):
    ds = _load_dataset(ctx)
    mask = np.isin(ds.val_y, ctx.cfg.target_classes)
    return ds.val_x[mask], ds.val_y[mask]


def _scenario(ctx: Context, seed: int | None = None) -> Scenario:
    return Scenario(
        dataset=_load_dataset(ctx), m0=_load_m0(ctx), mp=_load_mp(ctx),
        cvae=_load_cvae(ctx), target_classes=tuple(ctx.cfg.target_classes),
        seed=ctx.seed if seed is None else seed,
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth_data(ctx: Context, args) -> list[str]:
    ds = models.synth_dataset(ctx.cfg.dataset_spec(ctx.seed))
    formats.save_activations(ctx.path(DATA_TRAIN),
                             models.ActivationBatch(ds.train_x, labels=ds.train_y))
    formats.save_activations(ctx.path(DATA_VAL),
                             models.ActivationBatch(ds.val_x, labels=ds.val_y))
    mask = np.isin(ds.train_y, ctx.cfg.target_classes)
    formats.save_activations(ctx.path(TARGET_STREAM),
                             models.ActivationBatch(ds.train_x[mask],
                                                    labels=ds.train_y[mask]))
    return [DATA_TRAIN, DATA_VAL, TARGET_STREAM]


def cmd_train_source(ctx: Context, args) -> list[str]:
    ds = _load_dataset(ctx)
    model, log = models.train_source_model(
        ds, feature_widths=tuple(ctx.cfg.feature_widths),
        hyper=ctx.cfg.source_hyper(), seed=ctx.seed)
    formats.save_mlp(ctx.path(MODEL_M0), model)
    _write_json(ctx.path(SOURCE_LOG), [
        {"epoch": e.epoch, "train_loss": e.train_loss,
         "train_accuracy": e.train_accuracy, "val_accuracy": e.val_accuracy}
        for e in log
    ])
    return [MODEL_M0, SOURCE_LOG]


def cmd_prune(ctx: Context, args) -> list[str]:
    ds = _load_dataset(ctx)
    m0 = _load_m0(ctx)
    mp = models.prune_model(m0, ctx.cfg.prune_fraction, ds,
                            finetune_hyper=ctx.cfg.finetune_hyper(), seed=ctx.seed)
    formats.save_mlp(ctx.path(MODEL_MP), mp)
    return [MODEL_MP]


def cmd_dump_activations(ctx: Context, args) -> list[str]:
    ds = _load_dataset(ctx)
    mp = _load_mp(ctx)
    batch = models.extract_activations(mp, ds.train_x, labels=ds.train_y)
    formats.save_activations(ctx.path(ACTS_TRAIN), batch)
    return [ACTS_TRAIN]


def cmd_train_cvae(ctx: Context, args) -> list[str]:
    batch = formats.load_activations(ctx.require(ACTS_TRAIN, "dump-activations"))
    model, log = cvae.train_cvae(
        batch, ctx.cfg.classes, hyper=ctx.cfg.cvae_hyper(), seed=ctx.seed,
        z_dim=ctx.cfg.cvae_z_dim, enc_widths=tuple(ctx.cfg.cvae_enc_widths),
        dec_widths=tuple(ctx.cfg.cvae_dec_widths))
    formats.save_cvae(ctx.path(CVAE_ENC), ctx.path(CVAE_DEC), model)
    _write_json(ctx.path(CVAE_LOG), [
        {"epoch": e.epoch, "loss": e.loss, "recon": e.recon, "kl": e.kl,
         "beta": e.beta}
        for e in log
    ])
    return [CVAE_ENC, CVAE_DEC, CVAE_LOG]


def cmd_train_uncond(ctx: Context, args) -> list[str]:
    batch = formats.load_activations(ctx.require(ACTS_TRAIN, "dump-activations"))
    pack, logs = cvae.train_uncond_pack(
        batch, ctx.cfg.classes, hyper=ctx.cfg.cvae_hyper(), seed=ctx.seed,
        z_dim=ctx.cfg.uncond_z_dim, enc_widths=tuple(ctx.cfg.uncond_enc_widths),
        dec_widths=tuple(ctx.cfg.uncond_dec_widths))
    written = []
    for c, model in enumerate(pack.vaes):
        formats.save_cvae(ctx.path(uncond_enc_name(c)), ctx.path(uncond_dec_name(c)),
                          model)
        written += [uncond_enc_name(c), uncond_dec_name(c)]
    _write_json(ctx.path(UNCOND_LOG), [
        {"class": c, "final_loss": log[-1].loss, "final_recon": log[-1].recon,
         "final_kl": log[-1].kl}
        for c, log in enumerate(logs)
    ])
    return written + [UNCOND_LOG]


def cmd_estimate_domain(ctx: Context, args) -> list[str]:
    m0 = _load_m0(ctx)
    stream = _load_stream(ctx, getattr(args, "stream", None))
    dist = adaptation.estimate_domain(m0, stream.features)
    _write_json(ctx.path(DOMAIN), {
        "probs": [float(p) for p in dist.probs],
        "support": [int(c) for c in dist.support],
        "observed": int(stream.features.shape[0]),
    })
    return [DOMAIN]


def _load_domain(ctx: Context) -> ClassDistribution:
    p = ctx.require(DOMAIN, "estimate-domain")
    data = json.loads(p.read_text(encoding="utf-8"))
    return ClassDistribution(np.asarray(data["probs"], dtype=np.float64))


def cmd_adapt(ctx: Context, args) -> list[str]:
    mp = _load_mp(ctx)
    generator = _load_cvae(ctx)
    stream = _load_stream(ctx, None)
    val = _val_subset(ctx)
    cfg = ctx.cfg.adapt_config()
    mode = getattr(args, "labels", "ground-truth")
    if mode == "estimated":
        dist = _load_domain(ctx)
        cfg.label_mode = LabelMode.ESTIMATED
    else:
        if stream.labels is None:
            raise LabelError("target stream carries no labels; "
                             "use --labels estimated instead")
        dist = ClassDistribution.from_labels(stream.labels, ctx.cfg.classes)
        cfg.label_mode = LabelMode.GROUND_TRUTH
    adapted, report = adaptation.adapt_classifier(mp, generator, dist, cfg,
                                                  seed=ctx.seed, val=val)
    formats.save_mlp(ctx.path(ADAPTED), adapted)
    _write_json(ctx.path(ADAPT_REPORT), report.to_json_dict())
    return [ADAPTED, ADAPT_REPORT]


def cmd_baseline(ctx: Context, args) -> list[str]:
    mp = _load_mp(ctx)
    stream = _load_stream(ctx, None)
    if stream.labels is None:
        raise LabelError("target stream carries no labels")
    val = _val_subset(ctx)
    stored = models.extract_activations(mp, stream.features, labels=stream.labels)
    model, report = adaptation.retrain_baseline(
        mp, stored, LabelMode.GROUND_TRUTH, budget_bytes=getattr(args, "budget", None),
        hyper=ctx.cfg.baseline_hyper(), seed=ctx.seed, val=val)
    formats.save_mlp(ctx.path(BASELINE_MODEL), model)
    _write_json(ctx.path(BASELINE_REPORT), report.to_json_dict())
    return [BASELINE_MODEL, BASELINE_REPORT]


def _verify_checksums(ctx: Context, names: list[str]) -> None:
    """Compare each named artifact against the checksum its producing
    manifest recorded. Artifacts no manifest mentions are skipped."""
    recorded: dict[str, str] = {}
    for mpath in sorted(ctx.out.glob("manifest_*.json")):
        data = json.loads(mpath.read_text(encoding="utf-8"))
        recorded.update(data.get("artifacts", {}))
    for name in names:
        want = recorded.get(name)
        if want is None:
            continue
        got = _sha256(ctx.path(name))
        if got != want:
            raise ChecksumError(
                f"{name} does not match its manifest checksum "
                f"(recorded {want[:12]}…, file {got[:12]}…)"
            )


def cmd_evaluate(ctx: Context, args) -> list[str]:
    used = [MODEL_M0, MODEL_MP, DATA_VAL]
    m0 = _load_m0(ctx)
    mp = _load_mp(ctx)
    val = _val_subset(ctx)
    results = {
        "target_classes": [int(c) for c in ctx.cfg.target_classes],
        "deployed": evaluation.top1_accuracy(m0, *val),
        "pruned_no_retrain": evaluation.top1_accuracy(mp, *val),
    }
    for name, key in ((ADAPTED, "adapted"), (BASELINE_MODEL, "baseline")):
        if ctx.path(name).exists():
            used.append(name)
            results[key] = evaluation.top1_accuracy(formats.load_mlp(ctx.path(name)),
                                                    *val)
    _verify_checksums(ctx, used)
    _write_json(ctx.path(EVALUATION), results)
    return [EVALUATION]


def cmd_sweep_budget(ctx: Context, args) -> list[str]:
    scenario = _scenario(ctx)
    result = evaluation.budget_sweep(
        scenario, list(ctx.cfg.sweep_budgets), seeds=ctx.cfg.seeds,
        cfg=ctx.cfg.adapt_config(), baseline_hyper=ctx.cfg.baseline_hyper())
    ctx.path(SWEEP_CSV).write_text(result.to_csv(), encoding="utf-8")
    _write_json(ctx.path(SWEEP_JSON), result.to_json_dict())
    return [SWEEP_CSV, SWEEP_JSON]


def cmd_compare_uncond(ctx: Context, args) -> list[str]:
    scenario = _scenario(ctx)
    pack = _load_pack(ctx)
    report = evaluation.cond_vs_uncond(scenario, pack, cfg=ctx.cfg.adapt_config(),
                                       seeds=ctx.cfg.seeds)
    _write_json(ctx.path(UNCOND_COMPARE), report.to_json_dict())
    return [UNCOND_COMPARE]


def cmd_memory_report(ctx: Context, args) -> list[str]:
    m0, mp = _load_m0(ctx), _load_mp(ctx)
    gen = _load_cvae(ctx)
    pack = _load_pack(ctx)
    stream = _load_stream(ctx, None)
    loco = evaluation.build_ledger(evaluation.LedgerSpec(
        "loco", m0, mp, generator=gen, pool_rows=ctx.cfg.adapt_r,
        batch_size=ctx.cfg.adapt_batch))
    base = evaluation.build_ledger(evaluation.LedgerSpec(
        "baseline", m0, mp, stored_rows=stream.features.shape[0],
        batch_size=ctx.cfg.baseline_batch))
    cvae_bytes = models.model_memory_bytes(gen)
    pack_bytes = models.model_memory_bytes(pack)
    _write_json(ctx.path(MEMORY), {
        "loco": loco.to_json_dict(),
        "baseline": base.to_json_dict(),
        "baseline_over_loco_total": base.total / loco.total,
        "cvae_bytes": cvae_bytes,
        "uncond_pack_bytes": pack_bytes,
        "uncond_pack_over_cvae": pack_bytes / cvae_bytes,
    })
    return [MEMORY]


def cmd_run_all(ctx: Context, args) -> list[str]:
    stages = [
        ("synth-data", cmd_synth_data, {}),
        ("train-source", cmd_train_source, {}),
        ("prune", cmd_prune, {}),
        ("dump-activations", cmd_dump_activations, {}),
        ("train-cvae", cmd_train_cvae, {}),
        ("train-uncond", cmd_train_uncond, {}),
        ("estimate-domain", cmd_estimate_domain, {}),
        ("adapt", cmd_adapt, {"labels": "estimated"}),
        ("baseline", cmd_baseline, {"budget": None}),
        ("evaluate", cmd_evaluate, {}),
        ("sweep-budget", cmd_sweep_budget, {}),
        ("compare-uncond", cmd_compare_uncond, {}),
        ("memory-report", cmd_memory_report, {}),
    ]
    for name, fn, extra in stages:
        stage_args = argparse.Namespace(**extra)
        written = fn(ctx, stage_args)
        _write_manifest(ctx, name, written)
    subsets = [tuple(ctx.cfg.target_classes), *ctx.cfg.extra_subsets]
    scenarios = []
    ds, m0, mp_model, gen = (_load_dataset(ctx), _load_m0(ctx), _load_mp(ctx),
                             _load_cvae(ctx))
    for subset in subsets:
        scenarios.append((
            "classes-" + "-".join(str(c) for c in subset),
            Scenario(dataset=ds, m0=m0, mp=mp_model, cvae=gen,
                     target_classes=subset, seed=ctx.seed),
        ))
    matrix = evaluation.run_experiment_matrix(
        scenarios, seeds=ctx.cfg.seeds, cfg=ctx.cfg.adapt_config(),
        baseline_hyper=ctx.cfg.baseline_hyper())
    _write_json(ctx.path(MATRIX), matrix.to_json_dict())
    return [MATRIX]


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train-source": cmd_train_source,
    "prune": cmd_prune,
    "dump-activations": cmd_dump_activations,
    "train-cvae": cmd_train_cvae,
    "train-uncond": cmd_train_uncond,
    "estimate-domain": cmd_estimate_domain,
    "adapt": cmd_adapt,
    "baseline": cmd_baseline,
    "evaluate": cmd_evaluate,
    "sweep-budget": cmd_sweep_budget,
    "compare-uncond": cmd_compare_uncond,
    "memory-report": cmd_memory_report,
    "run-all": cmd_run_all,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loco-pda",
        description="Generate class-conditioned activations and retrain a "
                    "pruned classifier on them, end to end at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None,
                       help="config file (defaults built in)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=str, default=None,
                       help="output directory (default $LOCO_PDA_OUT or ./loco_out)")
        if name == "estimate-domain":
            p.add_argument("--stream", type=str, default=None,
                           help="activation file of observed inputs "
                                "(default: the synthesized target stream)")
        if name == "adapt":
            p.add_argument("--labels", choices=["ground-truth", "estimated"],
                           default="ground-truth")
        if name == "baseline":
            p.add_argument("--budget", type=int, default=None,
                           help="stored-sample budget in bytes (default unbounded)")
    return parser


def write_default_config(path) -> None:
    Path(path).write_text(render_config(PipelineConfig()), encoding="utf-8")


_ERROR_CODES = (
    (ConfigError, EXIT_CONFIG),
    (ChecksumError, EXIT_CHECKSUM),
    (FormatError, EXIT_FORMAT),
    (NumericError, EXIT_NUMERIC),
    (MissingInputError, EXIT_MISSING),
    (LocoError, EXIT_INVALID),
    (ValueError, EXIT_INVALID),
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else PipelineConfig()
        cfg.validate()
        out = Path(args.out or os.environ.get("LOCO_PDA_OUT", "loco_out"))
        out.mkdir(parents=True, exist_ok=True)
        ctx = Context(cfg, args.seed, out)
        written = COMMANDS[args.command](ctx, args)
        _write_manifest(ctx, args.command, written)
        for name in written:
            print(f"wrote {ctx.path(name)}")
        return 0
    except tuple(e for e, _ in _ERROR_CODES) as exc:
        for err_type, code in _ERROR_CODES:
            if isinstance(exc, err_type):
                print(f"error: {exc}", file=sys.stderr)
                return code
        raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
