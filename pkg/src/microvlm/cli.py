"""One entry point over the whole pipeline: datagen, train, eval, generate, serve.

Exit codes are a stable contract: 0 success, 1 internal failure, 2 usage or
input error. Every command with file outputs writes a RunManifest JSON next
to them (atomically), holding the resolved config so the run can be
reproduced byte-for-byte, timestamps aside.

Flag values win over config-file values, which win over defaults. The config
file is a flat UTF-8 key=value document whose keys are the long flag names
without the leading dashes (dashes may be written as underscores).
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2


class InputError(Exception):
    """User/input problem: maps to exit code 2."""


def _version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=2,
                             cwd=Path(__file__).parent)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except Exception:
        pass
    return f"microvlm-{__version__}"


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def write_manifest(path, command: str, config: dict, inputs: list[str],
                   outputs: list[str], started_at: str) -> None:
    """Atomic manifest write: tmp file then rename."""
    payload = {
        "command": command,
        "config": config,
        "seed": config.get("seed"),
        "inputs": inputs,
        "outputs": outputs,
        "started_at": started_at,
        "finished_at": _utc_now(),
        "version": _version_string(),
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _read_config_file(path) -> dict[str, str]:
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """flags > config file > defaults; returns the fully resolved config."""
    file_values = _read_config_file(args.config) if getattr(args, "config", None) else {}
    resolved = {}
    for key, default in defaults.items():
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            resolved[key] = flag_value
        elif key in file_values:
            caster = type(default) if default is not None else str
            raw = file_values[key]
            resolved[key] = (raw.lower() in ("1", "true", "yes")) if caster is bool \
                else caster(raw)
        else:
            resolved[key] = default
    return resolved


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_datagen(args) -> int:
    from .datagen import generate_corpus

    defaults = dict(out=None, captions=512, conversations=256, turns=2,
                    vqa_open=256, vqa_closed=256, vqa_test_open=64,
                    vqa_test_closed=64, seed=0)
    cfg = _resolve(args, defaults)
    if not cfg["out"]:
        raise InputError("--out directory is required")
    started = _utc_now()
    out_dir = Path(cfg["out"])
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise InputError(f"output directory not writable: {exc}") from exc
    paths = generate_corpus(
        out_dir, n_captions=cfg["captions"], n_conversations=cfg["conversations"],
        turns=cfg["turns"], n_vqa_open=cfg["vqa_open"], n_vqa_closed=cfg["vqa_closed"],
        n_test_open=cfg["vqa_test_open"], n_test_closed=cfg["vqa_test_closed"],
        seed=cfg["seed"])
    write_manifest(out_dir / "manifest.json", "datagen", cfg,
                   inputs=[], outputs=sorted(paths.values()), started_at=started)
    print(f"wrote {len(paths)} datasets under {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .model import ModelConfig, init_model
    from .training import StageConfig, export_loss_csv, run_stage

    defaults = dict(stage=None, data=None, init=None, out=None, steps=None,
                    batch_size=None, lr=None, seed=0, quiet=False)
    cfg = _resolve(args, defaults)
    for req in ("stage", "data", "out"):
        if not cfg[req]:
            raise InputError(f"--{req} is required")
    stage = cfg["stage"].upper()
    if stage in ("INSTRUCT", "FINETUNE") and not cfg["init"]:
        raise InputError(f"--init checkpoint is required for {stage} "
                         "(stages chain: ALIGN -> INSTRUCT -> FINETUNE)")
    if not Path(cfg["data"]).exists():
        raise InputError(f"data file not found: {cfg['data']}")
    started = _utc_now()
    if cfg["init"]:
        if not Path(cfg["init"]).exists():
            raise InputError(f"init checkpoint not found: {cfg['init']}")
        bundle = load_checkpoint(cfg["init"])
    else:
        bundle = init_model(ModelConfig(seed=cfg["seed"]))
    try:
        stage_cfg = StageConfig(
            stage=stage, data=cfg["data"], steps=cfg["steps"],
            batch_size=cfg["batch_size"] or 8, lr=cfg["lr"], seed=cfg["seed"],
            checkpoint_out=cfg["out"])
    except ValueError as exc:
        raise InputError(str(exc)) from exc

    def report(step, loss):
        if not cfg["quiet"] and (step % 50 == 0 or step == 1):
            print(f"step {step}: loss {loss:.4f}", flush=True)

    bundle, log = run_stage(bundle, stage_cfg, on_step=report)
    loss_csv = str(Path(cfg["out"]).with_suffix(".loss.csv"))
    export_loss_csv(log, loss_csv)
    write_manifest(Path(cfg["out"]).parent / (Path(cfg["out"]).name + ".manifest.json"),
                   "train", cfg, inputs=[cfg["data"]] + ([cfg["init"]] if cfg["init"] else []),
                   outputs=[cfg["out"], loss_csv], started_at=started)
    summary = log.summary()
    print(f"{stage} done: {summary['steps']} steps, "
          f"final moving-average loss {summary['final_moving_average']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .datagen import load_vqa_samples
    from .evaluation import echo_generator, evaluate_samples, evaluate_split

    defaults = dict(model=None, split=None, report=None, max_new=48,
                    oracle_echo=False)
    cfg = _resolve(args, defaults)
    if not cfg["split"]:
        raise InputError("--split is required")
    if not Path(cfg["split"]).exists():
        raise InputError(f"split file not found: {cfg['split']}")
    started = _utc_now()
    if cfg["oracle_echo"]:
        samples = load_vqa_samples(cfg["split"])
        report = evaluate_samples(samples, echo_generator,
                                  images_root=Path(cfg["split"]).parent,
                                  dataset_name=Path(cfg["split"]).stem)
    else:
        if not cfg["model"]:
            raise InputError("--model is required (or use --oracle-echo)")
        if not Path(cfg["model"]).exists():
            raise InputError(f"model checkpoint not found: {cfg['model']}")
        bundle = load_checkpoint(cfg["model"])
        report = evaluate_split(bundle, cfg["split"], max_new=cfg["max_new"])
    if report.n_open + report.n_closed == 0:
        raise InputError(f"split {cfg['split']} produced no scorable samples "
                         f"({report.n_failed} failed)")

    outputs = []
    if cfg["report"]:
        report_path = Path(cfg["report"])
        report_path.write_text(report.to_json() + "\n", encoding="utf-8")
        table_path = report_path.with_suffix(".txt")
        table_path.write_text(report.render_table(), encoding="utf-8")
        outputs = [str(report_path), str(table_path)]
        write_manifest(report_path.parent / (report_path.name + ".manifest.json"),
                       "eval", cfg, inputs=[cfg["split"]] +
                       ([cfg["model"]] if cfg["model"] else []),
                       outputs=outputs, started_at=started)
    open_pct = report.open_recall_pct
    closed_pct = report.closed_accuracy_pct
    print(f"open_recall_pct={open_pct if open_pct is not None else 'n/a'}")
    print(f"closed_accuracy_pct={closed_pct if closed_pct is not None else 'n/a'}")
    return EXIT_OK


def cmd_generate(args) -> int:
    from . import tokenizer as tok
    from .checkpoint import load_checkpoint
    from .images import load_image
    from .model import DecodePolicy, generate

    defaults = dict(model=None, image=None, prompt=None, temp=None, seed=0,
                    max_new=64)
    cfg = _resolve(args, defaults)
    if not cfg["model"] or cfg["prompt"] is None:
        raise InputError("--model and --prompt are required")
    if not Path(cfg["model"]).exists():
        raise InputError(f"model checkpoint not found: {cfg['model']}")
    bundle = load_checkpoint(cfg["model"])
    image = None
    if cfg["image"]:
        try:
            image = load_image(cfg["image"])
        except (OSError, ValueError) as exc:
            raise InputError(f"IMAGE_DECODE: {exc}") from exc
    rendered = tok.render_conversation(
        [tok.Turn("user", cfg["prompt"])], include_image=image is not None,
        add_generation_prompt=True)
    policy = DecodePolicy(mode="greedy") if cfg["temp"] is None else \
        DecodePolicy(mode="temperature", temperature=cfg["temp"], seed=cfg["seed"])
    try:
        result = generate(bundle, rendered, image=image, policy=policy,
                          max_new=cfg["max_new"])
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    print(result.text)
    return EXIT_OK


def cmd_serve(args) -> int:
    from .serving import InferenceService, run_server
    from .telemetry import parse_provider_spec

    defaults = dict(model=None, host="127.0.0.1", port=8080,
                    power_provider="none", report_out="telemetry_report.json")
    cfg = _resolve(args, defaults)
    if not cfg["model"]:
        raise InputError("--model is required")
    if not Path(cfg["model"]).exists():
        raise InputError(f"model checkpoint not found: {cfg['model']}")
    try:
        provider = parse_provider_spec(cfg["power_provider"])
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    started = _utc_now()
    service = InferenceService(checkpoint_path=cfg["model"], provider=provider)
    try:
        run_server(service, cfg["host"], cfg["port"], report_out=cfg["report_out"],
                   on_bound=lambda port: print(
                       f"listening on http://{cfg['host']}:{port}", flush=True))
    except OSError as exc:
        raise InputError(f"cannot bind {cfg['host']}:{cfg['port']}: {exc}") from exc
    final = service.sampler.report(service.envelope)
    if final is not None:
        print(final.render_table())
    write_manifest(Path(cfg["report_out"]).parent /
                   (Path(cfg["report_out"]).name + ".manifest.json"),
                   "serve", cfg, inputs=[cfg["model"]],
                   outputs=[cfg["report_out"]], started_at=started)
    print("shutdown complete")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="microvlm",
        description="Train, evaluate, and serve a desk-scale multimodal chat model.")
    parser.add_argument("--version", action="version", version=_version_string())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="emit the synthetic toy corpus")
    p.add_argument("--out")
    p.add_argument("--captions", type=int)
    p.add_argument("--conversations", type=int)
    p.add_argument("--turns", type=int)
    p.add_argument("--vqa-open", dest="vqa_open", type=int)
    p.add_argument("--vqa-closed", dest="vqa_closed", type=int)
    p.add_argument("--vqa-test-open", dest="vqa_test_open", type=int)
    p.add_argument("--vqa-test-closed", dest="vqa_test_closed", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="run one tuning stage")
    p.add_argument("--stage", choices=["align", "instruct", "finetune"])
    p.add_argument("--data")
    p.add_argument("--init")
    p.add_argument("--out")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--quiet", action="store_const", const=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a model on a VQA split")
    p.add_argument("--model")
    p.add_argument("--split")
    p.add_argument("--report")
    p.add_argument("--max-new", dest="max_new", type=int)
    p.add_argument("--oracle-echo", dest="oracle_echo", action="store_const", const=True,
                   help="test hook: echo gold answers instead of running the model")
    p.add_argument("--config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="answer one prompt")
    p.add_argument("--model")
    p.add_argument("--image")
    p.add_argument("--prompt")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--greedy", action="store_true")
    group.add_argument("--temp", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-new", dest="max_new", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("serve", help="run the HTTP inference service")
    p.add_argument("--model")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--power-provider", dest="power_provider")
    p.add_argument("--report-out", dest="report_out")
    p.add_argument("--config")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_INTERNAL
    except Exception as exc:  # internal failure contract
        import traceback
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
