"""Command-line interface: ``sgglc <command>`` or ``python3 -m sgglc <command>``."""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional

import numpy as np

from . import model as model_mod
from .config import ConfigError, ModelConfig
from .image import ImageFormatError, crop_to_multiple, degrade_bicubic, from_tensor, load_image, save_image, to_tensor
from .metrics import MetricReport, evaluate, mean_report
from .prior import PriorMap, extract_prior, load_prior, load_vgg
from .sgt import FormatError
from .tensor import Tensor, deterministic, no_grad, set_debug
from . import ops, training

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_FAIL):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _config(args) -> ModelConfig:
    if getattr(args, "config", None):
        try:
            return ModelConfig.from_json(args.config)
        except FileNotFoundError as exc:
            raise CliError(f"config not found: {args.config}", EXIT_USAGE) from exc
    presets = {"base": ModelConfig.base, "large": ModelConfig.large, "tiny": ModelConfig.tiny}
    return presets[args.preset](scale=args.scale)


def _config_for_checkpoint(args, path=None) -> ModelConfig:
    """Config stored with the checkpoint at ``path`` (default ``--checkpoint``), unless --config overrides it."""
    path = args.checkpoint if path is None else path
    stored = model_mod.checkpoint_config(path) if _exists(path) else None
    cfg = _config(args) if (args.config or stored is None) else stored
    if stored is not None and stored.scale != cfg.scale:
        raise CliError(f"scale mismatch: checkpoint is x{stored.scale}, config is x{cfg.scale}")
    return cfg


def _exists(path) -> bool:
    return path is not None and os.path.exists(path)


def _load_params(path, cfg: ModelConfig):
    if not _exists(path):
        raise CliError(f"checkpoint not found: {path}")
    return model_mod.load_checkpoint(path, cfg)


def _vgg(args, cfg: ModelConfig):
    if args.vgg:
        if not _exists(args.vgg):
            raise CliError(f"VGG weights not found: {args.vgg}")
        vgg = load_vgg(args.vgg)
        if vgg.out_channels != cfg.prior_channels:
            raise CliError(f"VGG output width {vgg.out_channels} != prior_channels {cfg.prior_channels}")
        return vgg
    return training.default_vgg(cfg, args.vgg_seed)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SGGLC_THREADS", "1")))
    except ValueError:
        raise CliError("SGGLC_THREADS must be an integer", EXIT_USAGE)


def _parse_res(text: str):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like 1280x720, got {text!r}")
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("resolution must be positive")
    return w, h


def super_resolve(img, params, cfg: ModelConfig, prior: Optional[PriorMap]):
    x = to_tensor(img)
    with no_grad():
        y = model_mod.forward(x, prior, params, cfg)
    return from_tensor(y)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_sr(args) -> dict:
    cfg = _config_for_checkpoint(args)
    params = _load_params(args.checkpoint, cfg)
    img = load_image(args.input)
    if img.channels != 3:
        raise CliError("sr expects an RGB input image")
    prior, t_prior = None, 0.0
    if cfg.injection_indices:
        t0 = time.perf_counter()
        if args.prior:
            if not _exists(args.prior):
                raise CliError(f"prior not found: {args.prior}")
            prior = load_prior(args.prior, (img.height, img.width), cfg.prior_channels)
        elif args.extract:
            prior = extract_prior(img, _vgg(args, cfg))
        else:
            raise CliError("this config injects semantic priors: pass --prior FILE or --extract", EXIT_USAGE)
        t_prior = (time.perf_counter() - t0) * 1e3
    t0 = time.perf_counter()
    out = super_resolve(img, params, cfg, prior)
    t_net = (time.perf_counter() - t0) * 1e3
    save_image(out, args.output)
    return {"input": args.input, "output": args.output, "scale": cfg.scale,
            "in_size": [img.width, img.height], "out_size": [out.width, out.height],
            "prior_ms": round(t_prior, 3), "network_ms": round(t_net, 3),
            "text": [f"wrote {args.output} ({out.width}x{out.height}, x{cfg.scale})",
                     f"prior {t_prior:.1f} ms, network {t_net:.1f} ms"]}


def cmd_metrics(args) -> dict:
    ref, test = load_image(args.ref), load_image(args.test)
    rep = evaluate(ref, test, args.scale)
    rec = rep.record(os.path.basename(args.test), args.scale)
    return dict(rec, crop_border=rep.crop_border, text=[rep.line(os.path.basename(args.test), args.scale)])


def _deviation(value: float, target: float) -> float:
    return 100.0 * (value - target) / target


def cmd_stats(args) -> dict:
    cfg = _config(args)
    w, h = args.out_res
    st = model_mod.model_stats(cfg, out_h=h, out_w=w)
    k, g = st.param_count / 1e3, st.multiply_adds / 1e9
    text = [f"config: x{cfg.scale}, C={cfg.channels}, {cfg.n_glcm} GLCM x {cfg.n_gldeb} GLDEB, "
            f"priors before GLCM {list(cfg.injection_indices)}",
            f"params        {k:10.3f} K",
            f"multiply-adds {g:10.3f} G  (output {w}x{h})",
            "per module:                   params (K)   multiply-adds (G)"]
    for name in st.params_by_module:
        text.append(f"  {name:26s} {st.params_by_module[name] / 1e3:10.3f}   {st.macs_by_module.get(name, 0) / 1e9:12.4f}")
    result = {"scale": cfg.scale, "channels": cfg.channels, "out_w": w, "out_h": h,
              "params": st.param_count, "params_k": k, "multiply_adds": st.multiply_adds, "multiply_adds_g": g,
              "params_by_module": st.params_by_module, "multiply_adds_by_module": st.macs_by_module}
    pub = st.published(cfg)
    if pub is not None and (w, h) == (1280, 720):
        dp, dm = _deviation(k, pub[0]), _deviation(g, pub[1])
        result["published"] = {"params_k": pub[0], "multiply_adds_g": pub[1],
                               "params_deviation_pct": dp, "multiply_adds_deviation_pct": dm}
        text.append(f"published: {pub[0]} K params ({dp:+.1f}%), {pub[1]} G multiply-adds ({dm:+.1f}%)")
    result["text"] = text
    return result


def cmd_gradcheck(args) -> dict:
    cfg = _config(args)
    t0 = time.perf_counter()
    rep = training.grad_check(cfg, tolerance=args.tolerance, seed=args.seed, size=args.size,
                              max_entries=args.max_entries)
    ms = (time.perf_counter() - t0) * 1e3
    text = rep.lines() if args.verbose else [ln for ln in rep.lines() if ln.startswith("FAIL")]
    text.append(f"{'PASS' if rep.passed else 'FAIL'}: max rel err {rep.max_error:.3e} over {len(rep.errors)} "
                f"tensors (tolerance {rep.tolerance:g}, {ms:.0f} ms)")
    result = {"passed": rep.passed, "max_rel_error": rep.max_error, "tolerance": rep.tolerance,
              "errors": rep.errors, "checked": rep.checked, "refined": rep.refined, "elapsed_ms": ms, "text": text}
    if not rep.passed:
        raise _Failed(result)
    return result


class _Failed(Exception):
    """A command ran but reports a failing result (exit code 1, result still printed)."""

    def __init__(self, result: dict):
        super().__init__("check failed")
        self.result = result


def cmd_train(args) -> dict:
    cfg = _config_for_checkpoint(args, args.init) if args.init else _config(args)
    if args.init:
        params = _load_params(args.init, cfg)
    else:
        params = model_mod.build(cfg, args.seed)
    if args.steps == 0:
        if args.init:
            if os.path.isdir(args.checkpoint):
                shutil.rmtree(args.checkpoint)
            if os.path.isdir(args.init):
                shutil.copytree(args.init, args.checkpoint)
            else:
                shutil.copy2(args.init, args.checkpoint)
        else:
            model_mod.save_checkpoint(params, args.checkpoint, cfg)
        return {"steps": 0, "checkpoint": args.checkpoint, "text": [f"wrote {args.checkpoint} (0 steps)"]}
    if not args.data:
        raise CliError("train needs --data DIR with HR images", EXIT_USAGE)
    corpus = training.load_corpus(args.data, cfg.scale)
    tcfg = training.TrainConfig(lr0=args.lr, patch=args.patch, batch_size=args.batch, steps=args.steps,
                                seed=args.seed, deterministic=args.deterministic)
    vgg = _vgg(args, cfg) if cfg.injection_indices else None
    lines: List[str] = []
    log_fh = open(args.log, "w") if args.log else None

    def log(rec):
        lines.append(rec.line())
        if log_fh:
            log_fh.write(json.dumps(rec.__dict__) + "\n")

    try:
        summary = training.train(params, cfg, corpus, tcfg, vgg, log)
    finally:
        if log_fh:
            log_fh.close()
    model_mod.save_checkpoint(params, args.checkpoint, cfg)
    summary["checkpoint"] = args.checkpoint
    if args.summary:
        training.dump_summary(summary, args.summary)
    summary["text"] = lines[-min(len(lines), 5):] + [f"wrote {args.checkpoint}"]
    return summary


def cmd_bench(args) -> dict:
    paths = training.list_images(args.data)
    if not paths:
        raise CliError(f"no images in {args.data}")
    if args.bicubic:
        cfg, params, vgg = None, None, None
        scale = args.scale
    else:
        if not args.checkpoint:
            raise CliError("bench needs --checkpoint or --bicubic", EXIT_USAGE)
        cfg = _config_for_checkpoint(args)
        params = _load_params(args.checkpoint, cfg)
        vgg = _vgg(args, cfg) if cfg.injection_indices else None
        scale = cfg.scale

    def run(path) -> MetricReport:
        hr = crop_to_multiple(load_image(path), scale)
        if hr.channels != 3:
            hr = training._as_rgb(hr)
        lr = degrade_bicubic(hr, scale)
        if cfg is None:
            with no_grad():
                up = ops.bicubic_resize(Tensor(lr.data.transpose(2, 0, 1)[None].astype(np.float64)), hr.height, hr.width)
            sr = from_tensor(Tensor(up.data / 255.0))
        else:
            prior = extract_prior(lr, vgg) if vgg is not None else None
            sr = super_resolve(lr, params, cfg, prior)
        return evaluate(hr, sr, scale)

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        reports = list(pool.map(run, paths))  # map keeps input order
    names = [os.path.basename(p) for p in paths]
    mean = mean_report(reports)
    records = [r.record(n, scale) for n, r in zip(names, reports)]
    text = [r.line(n, scale) for n, r in zip(names, reports)] + [mean.line("mean", scale)]
    return {"scale": scale, "images": records, "mean": {"psnr_db": mean.psnr, "ssim": mean.ssim}, "text": text}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="emit one JSON object instead of text")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--deterministic", action="store_true", help="fixed-order reductions in convolutions")
    common.add_argument("--debug", action="store_true", help="raise on non-finite intermediate values")

    def config_opts(preset: str = "base") -> argparse.ArgumentParser:
        # built per command: parent actions are shared objects, so one set_defaults would leak into all
        opts = argparse.ArgumentParser(add_help=False)
        opts.add_argument("--config", help="ModelConfig JSON file")
        opts.add_argument("--preset", choices=("base", "large", "tiny"), default=preset)
        opts.add_argument("--scale", type=int, default=2)
        return opts

    cfg_opts = config_opts()

    vgg_opts = argparse.ArgumentParser(add_help=False)
    vgg_opts.add_argument("--vgg", help="VGG weight bundle (directory or zip); default is a fixed-seed stand-in")
    vgg_opts.add_argument("--vgg-seed", type=int, default=0)

    p = argparse.ArgumentParser(prog="sgglc", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sr", parents=[common, cfg_opts, vgg_opts], help="super-resolve one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--prior", help="SGT1 prior file")
    g.add_argument("--extract", action="store_true", help="compute the prior with the VGG extractor")
    s.set_defaults(func=cmd_sr)

    s = sub.add_parser("metrics", parents=[common], help="luma PSNR/SSIM between two images")
    s.add_argument("--ref", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--scale", type=int, required=True, help="also the border crop in pixels")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("stats", parents=[common, cfg_opts], help="parameter and multiply-add counts")
    s.add_argument("--out-res", type=_parse_res, default=(1280, 720), help="output WxH (default 1280x720)")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("gradcheck", parents=[common, config_opts("tiny")], help="finite-difference gradient check")
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.add_argument("--size", type=int, default=8, help="LR input side")
    s.add_argument("--max-entries", type=int, default=None, help="sample at most N entries per tensor")
    s.add_argument("--verbose", action="store_true", help="list every tensor")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("train", parents=[common, cfg_opts, vgg_opts], help="train on a directory of HR images")
    s.add_argument("--checkpoint", required=True, help="output checkpoint directory")
    s.add_argument("--init", help="start from this checkpoint instead of a fresh build")
    s.add_argument("--data", help="directory of HR images")
    s.add_argument("--steps", type=int, default=1000)
    s.add_argument("--patch", type=int, default=64, help="LR patch side")
    s.add_argument("--batch", type=int, default=16)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--log", help="JSON-lines training log")
    s.add_argument("--summary", help="JSON summary file")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("bench", parents=[common, cfg_opts, vgg_opts], help="evaluate over a directory of HR images")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--bicubic", action="store_true", help="score plain bicubic upscaling instead of a model")
    s.set_defaults(func=cmd_bench)
    return p


def _emit(args, command: str, ok: bool, result: Optional[dict] = None, error: Optional[str] = None) -> None:
    result = dict(result or {})
    text = result.pop("text", [])
    if getattr(args, "json", False):
        print(json.dumps({"command": command, "ok": ok, "result": result, "error": error}, sort_keys=True))
        return
    for line in text:
        print(line)
    if error:
        print(f"error: {error}", file=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.debug:
        set_debug(True)
    try:
        with deterministic(args.deterministic):
            result = args.func(args)
    except _Failed as exc:
        _emit(args, args.command, False, exc.result, "check failed")
        return EXIT_FAIL
    except CliError as exc:
        _emit(args, args.command, False, error=str(exc))
        return exc.code
    except (ConfigError, model_mod.CheckpointError, FormatError, ImageFormatError, FileNotFoundError,
            ValueError) as exc:
        _emit(args, args.command, False, error=str(exc))
        return EXIT_FAIL
    _emit(args, args.command, True, result)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
