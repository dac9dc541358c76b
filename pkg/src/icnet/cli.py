"""Command-line entry point: ``icnet {xor-demo,train,wld,count,verify}``.

Exit codes: 0 success, 1 failed verification or diverged training, 2 usage or
configuration error, 3 missing or malformed data.
"""

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from icnet import ic_neuron as icn
from icnet import models, trainer, verify, wld
from icnet.config import ConfigError, RunConfig
from icnet.datasets import DataError, load_splits
from icnet.tensor_core import NonFiniteError, resolve_dtype

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3

# command-line flags that are shorthands for config keys
FLAG_KEYS = {
    "seed": "run.seed",
    "out": "run.out",
    "model": "model.name",
    "policy": "model.policy",
    "mode": "model.mode",
    "alpha_mode": "model.alpha_mode",
    "dataset": "data.name",
    "data_dir": "data.dir",
    "epochs": "train.epochs",
    "dtype": "train.dtype",
    "teacher": "distill.teacher",
    "kd_form": "distill.kd_form",
    "kind": "xor.kind",
    "seeds": "xor.seeds",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="icnet", description="Inter-layer collision networks")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="INI or flat key = value file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("overrides", nargs="*", metavar="key=value")
        return sp

    x = common(sub.add_parser("xor-demo", help="fit the XOR points with IC and MP neurons"))
    x.add_argument("--kind", choices=["ic", "mp", "both"])
    x.add_argument("--seeds", type=int)

    for name, helptext in (("train", "train a model"), ("wld", "distill an IC student from a plain teacher")):
        t = common(sub.add_parser(name, help=helptext))
        t.add_argument("--model", choices=sorted(models.REGISTRY))
        t.add_argument("--policy", choices=models.POLICIES)
        t.add_argument("--mode", choices=["scratch", "from_pretrained"])
        t.add_argument("--alpha-mode", dest="alpha_mode", choices=["trainable", "manual"])
        t.add_argument("--dataset")
        t.add_argument("--data-dir", dest="data_dir")
        t.add_argument("--epochs", type=int)
        t.add_argument("--dtype", choices=["f32", "f64"])
        if name == "wld":
            t.add_argument("--teacher", help="teacher checkpoint (trained first if omitted)")
            t.add_argument("--kd-form", dest="kd_form", choices=list(wld.KD_FORMS))

    c = common(sub.add_parser("count", help="parameter and MAC overhead of a replacement policy"))
    c.add_argument("--model", choices=sorted(models.REGISTRY))
    c.add_argument("--policy", choices=models.POLICIES)
    c.add_argument("--json", action="store_true", help="print JSON instead of a table")

    v = sub.add_parser("verify", help="run the built-in self-checks")
    v.add_argument("--filter", help="only checks whose name contains this text")
    v.add_argument("--list", action="store_true", help="list check names")
    return p


def resolve_config(args):
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg.update_from_file(args.config)
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg.set(key, value)
    cfg.update_from_overrides(getattr(args, "overrides", []) or [])
    return cfg


def _out_dir(cfg, command, required):
    out = cfg["run.out"] or (f"runs/{command}" if required else "")
    if not out:
        return None
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.resolved").write_text(f"# sha256 {cfg.hash()}\n" + cfg.resolved_text())
    return path


def _train_config(cfg, epochs=None):
    return trainer.TrainConfig(
        epochs=epochs or cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        lr=cfg["train.lr"],
        lr_steps=cfg.lr_steps(),
        lr_factor=cfg["train.lr_factor"],
        momentum=cfg["train.momentum"],
        weight_decay=cfg["train.weight_decay"],
        seed=cfg["run.seed"],
        dtype=cfg["train.dtype"],
        record_wall_time=cfg["train.record_wall_time"],
    )


def _load_data(cfg, model_name):
    spec = models.get_spec(model_name)
    train_set, test_set = load_splits(
        cfg["data.name"],
        cfg["data.dir"] or None,
        n_train=cfg["data.n_train"] or None,
        n_test=cfg["data.n_test"] or None,
        seed=cfg["run.seed"],
        dtype=resolve_dtype(cfg["train.dtype"]),
    )
    if tuple(train_set.x.shape[1:]) != tuple(spec.input_shape):
        raise ConfigError(f"dataset {cfg['data.name']} has shape {train_set.x.shape[1:]}, {model_name} expects {spec.input_shape}")
    return train_set, test_set


def _print_summary(records):
    for r in records:
        if r.split == "test" or r is records[-1]:
            print(f"epoch {r.epoch:3d} {r.split:5s} loss {r.loss:.4f} top1 {r.top1:.4f} lambda {r.lam:.3f} alpha {r.alpha:.4f}")


def cmd_xor_demo(cfg):
    out = _out_dir(cfg, "xor-demo", required=False)
    seeds = range(cfg["run.seed"], cfg["run.seed"] + cfg["xor.seeds"])
    kinds = ["ic", "mp"] if cfg["xor.kind"] == "both" else [cfg["xor.kind"]]
    witness = icn.xor_witness_outputs()
    print("witness outputs on (0,0) (1,0) (0,1) (1,1):", " ".join(f"{v:.4f}" for v in witness))
    report = {"witness": witness.tolist(), "fits": {}}
    for kind in kinds:
        fit = icn.xor_fit(kind, seeds, steps=cfg["xor.steps"], lr=cfg["xor.lr"])
        solved = int(fit.solved().sum())
        print(f"{kind}: solved {solved}/{len(fit.seeds)} seeds, median mse {np.median(fit.mse):.3g}")
        report["fits"][kind] = {"solved": solved, "seeds": len(fit.seeds), "mse": fit.mse.tolist()}
    if out is not None:
        (out / "xor.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_train(cfg):
    train_set, test_set = _load_data(cfg, cfg["model.name"])
    out = _out_dir(cfg, "train", required=True)
    tcfg = _train_config(cfg)
    model = models.build(cfg["model.name"], seed=cfg["run.seed"], dtype=tcfg.dtype)
    if cfg["model.policy"] != "none":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            model = models.replace_with_ic(
                model, cfg["model.policy"], cfg["model.mode"], cfg["run.seed"], cfg["model.alpha_mode"], cfg["model.ic_biases"]
            )
    with trainer.MetricsWriter(out) as writer:
        res = trainer.train(model, train_set, tcfg, test_set, writer=writer)
    trainer.save_checkpoint(out / "model.icck", model, res.velocity, tcfg.epochs, tcfg.seed, {"config_hash": cfg.hash()})
    _print_summary(res.records)
    return EXIT_OK


def _distill_config(cfg):
    return wld.DistillConfig(
        tau=cfg["distill.tau"],
        e=cfg["distill.e"],
        lambda_start=cfg["distill.lambda_start"],
        lambda_end=cfg["distill.lambda_end"],
        lambda_decay=cfg["distill.lambda_decay"],
        lambda_steps=cfg["distill.lambda_steps"],
        alpha_mode=cfg["model.alpha_mode"],
        alpha_start=cfg["distill.alpha_start"],
        alpha_end=cfg["distill.alpha_end"],
        kd_form=cfg["distill.kd_form"],
        teacher_bn=cfg["distill.teacher_bn"],
    )


def cmd_wld(cfg):
    train_set, test_set = _load_data(cfg, cfg["model.name"])
    dcfg = _distill_config(cfg)
    out = _out_dir(cfg, "wld", required=True)
    tcfg = _train_config(cfg)
    if cfg["distill.teacher"]:
        try:
            ckpt = trainer.load_checkpoint(cfg["distill.teacher"])
        except OSError as exc:
            raise DataError(f"cannot read teacher checkpoint: {exc}") from None
        teacher, _ = trainer.restore(ckpt)
    else:
        teacher = models.build(cfg["model.name"], seed=cfg["run.seed"], dtype=tcfg.dtype)
        res = trainer.train(teacher, train_set, _train_config(cfg, cfg["distill.teacher_epochs"]), test_set)
        trainer.save_checkpoint(out / "teacher.icck", teacher, res.velocity, res.epochs_run, tcfg.seed)
    if teacher.ic_layers():
        raise ConfigError("the teacher must be a plain-convolution model")
    policy = cfg["model.policy"] if cfg["model.policy"] != "none" else "all_3x3"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        student = models.replace_with_ic(teacher, policy, "from_pretrained", cfg["run.seed"], dcfg.alpha_mode, cfg["model.ic_biases"])
    with trainer.MetricsWriter(out) as writer:
        res = wld.distill_train(teacher, student, dcfg, tcfg, train_set, test_set, writer=writer)
    trainer.save_checkpoint(out / "model.icck", student, res.velocity, tcfg.epochs, tcfg.seed, {"config_hash": cfg.hash()})
    _print_summary(res.records)
    return EXIT_OK


def cmd_count(cfg, as_json):
    out = _out_dir(cfg, "count", required=False)
    model = models.build(cfg["model.name"], seed=cfg["run.seed"])
    if cfg["model.policy"] != "none":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            model = models.replace_with_ic(model, cfg["model.policy"], "scratch", cfg["run.seed"])
    cost = models.count_model(model)
    report = cost.to_dict()
    replaced = cost.replaced_base_params()
    report["overhead_vs_replaced_params"] = cost.total.extra_params / replaced if replaced else 0.0
    report["model"], report["policy"] = cfg["model.name"], cfg["model.policy"]
    if out is not None:
        (out / "count.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if as_json:
        print(json.dumps(report, indent=2, sort_keys=True))
        return EXIT_OK
    print(f"{'layer':14s} {'kind':8s} {'params':>8s} {'+params':>8s} {'MACs':>11s} {'+MACs':>10s}")
    for name, kind, r in cost.layers:
        print(f"{name:14s} {kind:8s} {r.base_params:8d} {r.extra_params:8d} {r.base_macs:11d} {r.extra_macs:10d}")
    t = cost.total
    print(f"{'total':14s} {'':8s} {t.base_params:8d} {t.extra_params:8d} {t.base_macs:11d} {t.extra_macs:10d}")
    print(f"param overhead {float(t.param_ratio):.4f} of all conv params, "
          f"{report['overhead_vs_replaced_params']:.4f} of replaced layers; MAC overhead {float(t.mac_ratio):.4f}")
    return EXIT_OK


def cmd_verify(args):
    if args.list:
        print("\n".join(verify.CHECKS))
        return EXIT_OK
    results = verify.run(args.filter)
    if not results:
        print(f"no check matches {args.filter!r}", file=sys.stderr)
        return EXIT_USAGE
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    failed = sum(not ok for _, ok, _ in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_FAIL


def main(argv=None):
    try:
        args, extra = build_parser().parse_known_args(argv)
        bad = [e for e in extra if e.startswith("-") or "=" not in e]
        if bad:
            raise UsageError(f"unrecognized arguments: {' '.join(bad)}")
        if extra:
            if args.command == "verify":
                raise UsageError("verify takes no key=value overrides")
            args.overrides = list(args.overrides or []) + extra
        if args.command == "verify":
            return cmd_verify(args)
        cfg = resolve_config(args)
        if args.command == "xor-demo":
            return cmd_xor_demo(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "wld":
            return cmd_wld(cfg)
        return cmd_count(cfg, args.json)
    except (UsageError, ConfigError) as exc:
        print(f"icnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, trainer.CheckpointError) as exc:
        print(f"icnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, trainer.DivergenceError) as exc:
        print(f"icnet: training failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except ValueError as exc:
        print(f"icnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
