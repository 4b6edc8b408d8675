"""Evaluation metrics (base/new/harmonic-mean, per-domain accuracy,
top-k predictions), the run-file container, and the command-line surface.

Run file layout (little-endian):
    magic "RUNF" | version 0x01
    u32 config length | UTF-8 JSON config echo
    u32 T | T f32 loss curve
    u32 P | P f64 final parameter vector
    u32 P | P f64 ensemble parameter vector
"""

from __future__ import annotations

import argparse
import json
import struct
import sys
from dataclasses import dataclass, field

import numpy as np

from . import databench as db
from . import losses as L
from . import trainer as tr
from .databench import ArchiveFormatError, BadMagicError, SplitSubset, TruncatedFileError, VersionError
from .model import ClassBank, Encoder, LinearHead, embed, linear_head_logits, similarities, text_head_init
from .tensor import Tensor

RUN_MAGIC = b"RUNF"
RUN_VERSION = 1


class RunFileError(ValueError):
    """Raised on malformed run files."""


def harmonic_mean(acc_base: float, acc_new: float) -> float:
    total = acc_base + acc_new
    if total == 0.0:
        return 0.0
    return 2.0 * acc_base * acc_new / total


@dataclass
class EvalReport:
    acc_base: float
    acc_new: float
    acc_h: float
    per_domain: dict[int, float]
    per_class: dict[int, float]
    config: dict = field(default_factory=dict)
    topk: list[tuple[int, list[tuple[int, float]]]] | None = None

    def to_json(self) -> str:
        payload = {
            "acc_base": self.acc_base,
            "acc_new": self.acc_new,
            "acc_h": self.acc_h,
            "per_domain": {str(k): v for k, v in self.per_domain.items()},
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "config": self.config,
        }
        if self.topk is not None:
            payload["topk"] = [
                [sample, [[int(c), float(s)] for c, s in ranked]]
                for sample, ranked in self.topk
            ]
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        payload = json.loads(text)
        topk = None
        if "topk" in payload:
            topk = [
                (int(sample), [(int(c), float(s)) for c, s in ranked])
                for sample, ranked in payload["topk"]
            ]
        return cls(
            acc_base=payload["acc_base"],
            acc_new=payload["acc_new"],
            acc_h=payload["acc_h"],
            per_domain={int(k): v for k, v in payload["per_domain"].items()},
            per_class={int(k): v for k, v in payload["per_class"].items()},
            config=payload["config"],
            topk=topk,
        )


def _scores(
    encoder: Encoder,
    bank: ClassBank,
    features: np.ndarray,
    head: LinearHead | None,
    normalize_linear: bool,
) -> np.ndarray:
    x = Tensor(np.asarray(features, dtype=np.float64))
    if head is not None:
        feats = embed(encoder, x) if normalize_linear else encoder.forward_raw(x)
        return linear_head_logits(head, feats).data
    return similarities(bank, embed(encoder, x)).data


def evaluate(
    encoder: Encoder,
    bank: ClassBank,
    subset: SplitSubset,
    base_classes,
    tau: float = 0.01,
    head: LinearHead | None = None,
    normalize_linear: bool = False,
    topk: int | None = None,
) -> EvalReport:
    """Score every sample against all C classes; argmax predicts
    (ties broken toward the lowest class id)."""
    if subset.features.shape[0] == 0:
        raise ValueError("empty evaluation split")
    scores = _scores(encoder, bank, subset.features, head, normalize_linear)
    preds = np.argmax(scores, axis=1)
    labels = np.asarray(subset.labels, dtype=np.int64)
    domains = np.asarray(subset.domains, dtype=np.int64)
    correct = preds == labels

    base_set = set(int(c) for c in base_classes)
    is_base = np.array([int(lbl) in base_set for lbl in labels])

    def group_acc(mask: np.ndarray) -> float:
        return float(correct[mask].mean()) if mask.any() else 0.0

    acc_base = group_acc(is_base)
    acc_new = group_acc(~is_base)
    per_domain = {int(m): group_acc(domains == m) for m in np.unique(domains)}
    per_class = {int(c): group_acc(labels == c) for c in np.unique(labels)}

    topk_list = None
    if topk is not None:
        # report temperature-scaled softmax probabilities as scores
        shifted = scores / tau
        shifted -= shifted.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        order = np.argsort(-scores, axis=1, kind="stable")[:, :topk]
        topk_list = [
            (int(subset.indices[i]), [(int(c), float(probs[i, c])) for c in order[i]])
            for i in range(scores.shape[0])
        ]

    return EvalReport(
        acc_base=acc_base,
        acc_new=acc_new,
        acc_h=harmonic_mean(acc_base, acc_new),
        per_domain=per_domain,
        per_class=per_class,
        topk=topk_list,
    )


def zero_shot_evaluate(
    encoder0: Encoder,
    bank: ClassBank,
    subset: SplitSubset,
    base_classes,
    tau: float = 0.01,
    topk: int | None = None,
) -> EvalReport:
    """Evaluation with the untrained (initial) encoder: the zero-shot baseline."""
    return evaluate(encoder0, bank, subset, base_classes, tau=tau, topk=topk)


# ---------------------------------------------------------------------------
# Run file container


@dataclass
class RunFile:
    config: dict
    loss_curve: np.ndarray  # float32
    final_params: np.ndarray  # float64
    ensemble_params: np.ndarray  # float64


def save_run(path, config: dict, loss_curve, final_params, ensemble_params) -> None:
    config_bytes = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    curve = np.ascontiguousarray(loss_curve, dtype="<f4")
    final = np.ascontiguousarray(final_params, dtype="<f8")
    ens = np.ascontiguousarray(ensemble_params, dtype="<f8")
    if final.shape != ens.shape:
        raise ValueError("final and ensemble parameter vectors differ in length")
    with open(path, "wb") as fh:
        fh.write(RUN_MAGIC)
        fh.write(bytes([RUN_VERSION]))
        fh.write(struct.pack("<I", len(config_bytes)))
        fh.write(config_bytes)
        fh.write(struct.pack("<I", curve.size))
        fh.write(curve.tobytes())
        fh.write(struct.pack("<I", final.size))
        fh.write(final.tobytes())
        fh.write(struct.pack("<I", ens.size))
        fh.write(ens.tobytes())


def _read_exact(fh, count: int, what: str) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise RunFileError(f"truncated while reading {what}: expected {count} bytes, got {len(buf)}")
    return buf


def load_run(path) -> RunFile:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != RUN_MAGIC:
            raise RunFileError("bad run-file magic")
        if _read_exact(fh, 1, "version")[0] != RUN_VERSION:
            raise RunFileError("unsupported run-file version")
        (clen,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        config = json.loads(_read_exact(fh, clen, "config").decode("utf-8"))
        (t,) = struct.unpack("<I", _read_exact(fh, 4, "curve length"))
        curve = np.frombuffer(_read_exact(fh, 4 * t, "loss curve"), dtype="<f4").copy()
        (p,) = struct.unpack("<I", _read_exact(fh, 4, "final length"))
        final = np.frombuffer(_read_exact(fh, 8 * p, "final params"), dtype="<f8").copy()
        (q,) = struct.unpack("<I", _read_exact(fh, 4, "ensemble length"))
        ens = np.frombuffer(_read_exact(fh, 8 * q, "ensemble params"), dtype="<f8").copy()
    return RunFile(config=config, loss_curve=curve, final_params=final, ensemble_params=ens)


# ---------------------------------------------------------------------------
# CLI


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_margin(text: str) -> tuple[str, float]:
    if text == "adaptive":
        return L.MARGIN_ADAPTIVE, 0.0
    if text == "none":
        return L.MARGIN_NONE, 0.0
    if text.startswith("fixed:"):
        return L.MARGIN_FIXED, float(text.split(":", 1)[1])
    raise UsageError(f"bad --margin value {text!r}; use adaptive, fixed:<m> or none")


def _parse_ensemble(text: str) -> tuple[str, float]:
    if text in (tr.ENSEMBLE_BMA, tr.ENSEMBLE_AVG, tr.ENSEMBLE_NONE):
        return text, 0.999
    if text.startswith("ema:"):
        return tr.ENSEMBLE_EMA, float(text.split(":", 1)[1])
    if text == "ema":
        return tr.ENSEMBLE_EMA, 0.999
    raise UsageError(f"bad --ensemble value {text!r}; use bma, ema:<decay>, avg or none")


def build_parser() -> _Parser:
    parser = _Parser(prog="oodtune", description="Synthetic OOD fine-tuning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic embedding archive")
    gen.add_argument("--classes", type=int, default=20)
    gen.add_argument("--domains", type=int, default=3)
    gen.add_argument("--embed-dim", type=int, default=32)
    gen.add_argument("--input-dim", type=int, default=48)
    gen.add_argument("--per-class", type=int, default=50)
    gen.add_argument("--base-fraction", type=float, default=0.5)
    gen.add_argument("--test-domain", type=int, default=2)
    gen.add_argument("--noise-sigma", type=float, default=0.1)
    gen.add_argument("--domain-strength", type=float, default=0.5)
    gen.add_argument("--shots", type=int, default=None,
                     help="per-class-per-domain cap on train samples")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)

    train = sub.add_parser("train", help="fine-tune on the base-class training domains")
    train.add_argument("--data", required=True)
    train.add_argument("--out", required=True)
    train.add_argument("--lambda", dest="lam", type=float, default=0.3)
    train.add_argument("--beta", type=float, default=0.5)
    train.add_argument("--tau", type=float, default=0.01)
    train.add_argument("--lr", type=float, default=3e-3)
    train.add_argument("--steps", type=int, default=5000)
    train.add_argument("--batch", type=int, default=36)
    train.add_argument("--weight-decay", type=float, default=0.1)
    train.add_argument("--hidden", type=int, default=64)
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--margin", default="adaptive")
    train.add_argument("--ensemble", default="bma")
    train.add_argument("--head", choices=[tr.HEAD_METRIC, tr.HEAD_LINEAR], default=tr.HEAD_METRIC)
    train.add_argument("--bma-every", type=int, default=1)
    train.add_argument("--base-fraction", type=float, default=0.5)
    train.add_argument("--test-domain", type=int, default=None,
                       help="held-out domain; defaults to the last one")
    train.add_argument("--shots", type=int, default=None)

    ev = sub.add_parser("eval", help="evaluate a run file on a protocol split")
    ev.add_argument("--run", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", choices=["domain", "open", "both", "train"], default="both")
    ev.add_argument("--params", choices=["ensemble", "final", "zero"], default="ensemble")
    ev.add_argument("--topk", type=int, default=None)
    ev.add_argument("--json", action="store_true")

    ab = sub.add_parser("ablate", help="sweep margin x ensemble and report mean H")
    ab.add_argument("--data", required=True)
    ab.add_argument("--seeds", type=int, default=5)
    ab.add_argument("--steps", type=int, default=300)
    ab.add_argument("--lr", type=float, default=3e-3)
    ab.add_argument("--batch", type=int, default=36)
    ab.add_argument("--hidden", type=int, default=64)
    ab.add_argument("--base-fraction", type=float, default=0.5)
    ab.add_argument("--test-domain", type=int, default=None)
    ab.add_argument("--json", action="store_true")
    return parser


def _spec_for_archive(archive: db.EmbeddingArchive, base_fraction: float,
                      test_domain: int | None, seed: int,
                      shots: int | None = None) -> db.BenchmarkSpec:
    m = archive.num_domains
    return db.BenchmarkSpec(
        num_classes=archive.bank.num_classes,
        num_domains=m,
        embed_dim=archive.bank.dim,
        input_dim=archive.input_dim,
        samples_per_class_per_domain=1,  # unused by split()
        base_fraction=base_fraction,
        test_domain=m - 1 if test_domain is None else test_domain,
        seed=seed,
        shots=shots,
    )


def _build_model(config: dict, bank: ClassBank) -> tuple[Encoder, LinearHead | None]:
    rng = np.random.default_rng([config["seed"], 0])
    encoder = Encoder.init(config["input_dim"], config["hidden"], config["embed_dim"], rng)
    head = None
    if config["head"] == tr.HEAD_LINEAR:
        head = LinearHead.init(bank.num_classes, bank.dim, rng)
        text_head_init(head, bank)
    return encoder, head


def _set_model_params(encoder: Encoder, head: LinearHead | None, flat: np.ndarray) -> None:
    trainable = tr._Trainable(encoder, head)
    trainable.set_flat(flat)


def _cmd_gen(args) -> int:
    spec = db.BenchmarkSpec(
        num_classes=args.classes,
        num_domains=args.domains,
        embed_dim=args.embed_dim,
        input_dim=args.input_dim,
        samples_per_class_per_domain=args.per_class,
        base_fraction=args.base_fraction,
        test_domain=args.test_domain,
        noise_sigma=args.noise_sigma,
        domain_strength=args.domain_strength,
        seed=args.seed,
        shots=args.shots,
    )
    db.save(db.generate(spec), args.out)
    print(f"wrote {args.out}")
    return 0


def _train_config(args, archive: db.EmbeddingArchive) -> tuple[tr.TrainerConfig, dict]:
    margin_mode, fixed_m = _parse_margin(args.margin)
    ensemble_mode, ema_decay = _parse_ensemble(args.ensemble)
    cfg = tr.TrainerConfig(
        steps=args.steps,
        batch_size=args.batch,
        base_lr=args.lr,
        weight_decay=args.weight_decay,
        beta=args.beta,
        loss=L.LossConfig(tau=args.tau, lam=args.lam,
                          margin_mode=margin_mode, fixed_margin=fixed_m),
        seed=args.seed,
        ensemble_mode=ensemble_mode,
        ema_decay=ema_decay,
        bma_every=args.bma_every,
        head=args.head,
    )
    m = archive.num_domains
    echo = {
        "steps": cfg.steps,
        "batch_size": cfg.batch_size,
        "base_lr": cfg.base_lr,
        "weight_decay": cfg.weight_decay,
        "beta": cfg.beta,
        "tau": cfg.loss.tau,
        "lambda": cfg.loss.lam,
        "margin_mode": cfg.loss.margin_mode,
        "fixed_margin": cfg.loss.fixed_margin,
        "seed": cfg.seed,
        "ensemble_mode": cfg.ensemble_mode,
        "ema_decay": cfg.ema_decay,
        "bma_every": cfg.bma_every,
        "head": cfg.head,
        "hidden": args.hidden,
        "input_dim": archive.input_dim,
        "embed_dim": archive.bank.dim,
        "num_classes": archive.bank.num_classes,
        "num_domains": m,
        "base_fraction": args.base_fraction,
        "test_domain": m - 1 if args.test_domain is None else args.test_domain,
        "shots": args.shots,
    }
    return cfg, echo


def _cmd_train(args) -> int:
    archive = db.load(args.data)
    cfg, echo = _train_config(args, archive)
    spec = _spec_for_archive(archive, args.base_fraction, args.test_domain,
                             args.seed, args.shots)
    splits = db.split(archive, spec)
    encoder, head = _build_model(echo, archive.bank)
    result = tr.train(
        encoder, archive.bank,
        tr.TrainSet(splits.train.features.astype(np.float64), splits.train.labels),
        cfg, head=head,
    )
    save_run(args.out, echo, result.loss_curve, result.final_params, result.ensemble_params)
    print(f"wrote {args.out} (final loss {result.loss_curve[-1]:.4f})")
    return 0


def _cmd_eval(args) -> int:
    archive = db.load(args.data)
    run = load_run(args.run)
    config = run.config
    spec = _spec_for_archive(archive, config["base_fraction"], config["test_domain"],
                             config["seed"], config.get("shots"))
    splits = db.split(archive, spec)
    subset = {
        "domain": splits.test_domain_shift,
        "open": splits.test_open,
        "both": splits.test_both,
        "train": splits.train,
    }[args.split]

    encoder, head = _build_model(config, archive.bank)
    if args.params == "final":
        _set_model_params(encoder, head, run.final_params)
    elif args.params == "ensemble":
        _set_model_params(encoder, head, run.ensemble_params)
    # "zero" keeps the seeded initialization

    report = evaluate(encoder, archive.bank, subset, splits.base_classes,
                      tau=config["tau"], head=head, topk=args.topk)
    report.config = dict(config, split=args.split, params=args.params)
    if args.json:
        print(report.to_json())
    else:
        print(f"split={args.split} params={args.params}")
        print(f"  base accuracy: {report.acc_base:.4f}")
        print(f"  new accuracy:  {report.acc_new:.4f}")
        print(f"  harmonic mean: {report.acc_h:.4f}")
        for m, acc in sorted(report.per_domain.items()):
            print(f"  domain {m}: {acc:.4f}")
    return 0


ABLATION_GRID = [
    ("adaptive", "bma"),
    ("adaptive", "none"),
    ("none", "bma"),
    ("none", "none"),
]


def run_ablation(archive: db.EmbeddingArchive, seeds: list[int], steps: int,
                 lr: float = 3e-3, batch: int = 36, hidden: int = 64,
                 base_fraction: float = 0.5, test_domain: int | None = None) -> dict:
    """Train every margin x ensemble variant per seed; report mean
    base/new/H on the domain+class split."""
    results = {}
    for margin, ensemble in ABLATION_GRID:
        accs = []
        for seed in seeds:
            cfg = tr.TrainerConfig(
                steps=steps, batch_size=batch, base_lr=lr, seed=seed,
                loss=L.LossConfig(margin_mode=margin),
                ensemble_mode=ensemble,
            )
            spec = _spec_for_archive(archive, base_fraction, test_domain, seed)
            splits = db.split(archive, spec)
            rng = np.random.default_rng([seed, 0])
            encoder = Encoder.init(archive.input_dim, hidden, archive.bank.dim, rng)
            result = tr.train(
                encoder, archive.bank,
                tr.TrainSet(splits.train.features.astype(np.float64), splits.train.labels),
                cfg,
            )
            encoder.set_flat(result.ensemble_params)
            report = evaluate(encoder, archive.bank, splits.test_both,
                              splits.base_classes, tau=cfg.loss.tau)
            accs.append((report.acc_base, report.acc_new, report.acc_h))
        arr = np.array(accs)
        results[f"{margin}+{ensemble}"] = {
            "acc_base": float(arr[:, 0].mean()),
            "acc_new": float(arr[:, 1].mean()),
            "acc_h": float(arr[:, 2].mean()),
        }
    return results


def _cmd_ablate(args) -> int:
    archive = db.load(args.data)
    results = run_ablation(
        archive, seeds=list(range(args.seeds)), steps=args.steps,
        lr=args.lr, batch=args.batch, hidden=args.hidden,
        base_fraction=args.base_fraction, test_domain=args.test_domain,
    )
    if args.json:
        print(json.dumps(results, sort_keys=True, separators=(",", ":")))
    else:
        print(f"{'variant':<18} {'base':>8} {'new':>8} {'H':>8}")
        for name, row in results.items():
            print(f"{name:<18} {row['acc_base']:>8.4f} {row['acc_new']:>8.4f} {row['acc_h']:>8.4f}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        if args.command == "gen":
            return _cmd_gen(args)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "ablate":
            return _cmd_ablate(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ArchiveFormatError, RunFileError, db.GenerationError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())
