"""Command-line entry point: ``htrkd <command> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .ctc import DEFAULT_BEAM_WIDTH, beam_decode, greedy_decode
from .data import (
    AugmentSpec,
    Charset,
    build_charset,
    make_sample,
    normalize_image,
    random_text,
    read_manifest,
    read_pgm,
    sample_rng,
    to_dataset,
    write_manifest,
)
from .evaluation import DEFAULT_THETA, Lexicon, export_attention, lexicon_correct, metrics, word_confidences
from .model import PRESETS, ModelConfig, load, save
from .train import Network, Pools, TrainConfig, train

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
COMMANDS = ("gen-data", "train-teacher", "distill", "eval", "decode", "export-attention", "oracle",
            "toy-experiment")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # one machine-parsable line, exit 2
        print(f"error: kind=usage message={json.dumps(message)}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    manifest: str | None = None
    val_manifest: str | None = None
    checkpoint: str | None = None
    teacher_checkpoint: str | None = None
    out: str = "out"
    teacher: str = "toy-teacher"
    student: str = "toy-student"
    height: int = 32
    width: int = 256
    epochs: int = 30
    student_epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    clip: float = 5.0
    tau: float = 2.0
    kd: bool = True
    synthetic_r0: float = 0.1
    synthetic_rmax: float = 0.4
    stage_threshold: float = 0.75
    stage_delta: float = 0.05
    patience: int = 10
    min_delta: float = 1e-3
    task_weighting: str = "harder"
    curriculum: bool = True
    se_ratio: int = 4
    kernel: int = 3
    pool_2x2_blocks: int = 2
    aux_layer: int | None = None
    dtype: str = "float32"
    beam_width: int = DEFAULT_BEAM_WIDTH
    decoder: str = "greedy"
    lexicon: str | None = None
    theta: float = DEFAULT_THETA
    max_snap: int = 1
    min_freq: int = 1
    count: int = 100
    alphabet: str = "abcdeghkmnrs"
    min_len: int = 1
    max_len: int = 8
    augment: bool = False
    workers: int = 1
    images: list[str] = field(default_factory=list)
    lattice: str | None = None
    charset: str | None = None
    suite: str = "all"


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="htrkd", description="Handwritten text recognition with teacher-student distillation.")
    p.add_argument("--version", action="version", version=f"htrkd {__version__}")
    common = _Parser(add_help=False)
    g = common.add_argument_group("common")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="out", help="output directory")
    g.add_argument("--manifest", help="JSON-lines manifest of {image, text, source}")
    g.add_argument("--val-manifest", help="validation manifest")
    g.add_argument("--checkpoint", help="model directory written by training")
    g.add_argument("--teacher-checkpoint", help="frozen teacher directory (distill)")
    g.add_argument("--teacher", default="toy-teacher", choices=sorted(PRESETS), help="teacher shape preset")
    g.add_argument("--student", default="toy-student", choices=sorted(PRESETS), help="student shape preset")
    g.add_argument("--height", type=int, default=32)
    g.add_argument("--width", type=int, default=256)
    g.add_argument("--epochs", type=int, default=30)
    g.add_argument("--batch-size", type=int, default=32)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--clip", type=float, default=5.0)
    g.add_argument("--tau", type=float, default=2.0)
    g.add_argument("--no-kd", dest="kd", action="store_false", help="train the student with gamma = 0")
    g.add_argument("--synthetic-r0", type=float, default=0.1)
    g.add_argument("--synthetic-rmax", type=float, default=0.4)
    g.add_argument("--stage-threshold", type=float, default=0.75)
    g.add_argument("--stage-delta", type=float, default=0.05)
    g.add_argument("--patience", type=int, default=10)
    g.add_argument("--min-delta", type=float, default=1e-3)
    g.add_argument("--task-weighting", choices=("harder", "uniform"), default="harder")
    g.add_argument("--no-curriculum", dest="curriculum", action="store_false")
    g.add_argument("--se-ratio", type=int, default=4)
    g.add_argument("--kernel", type=int, default=3)
    g.add_argument("--pool-2x2-blocks", type=int, default=2)
    g.add_argument("--aux-layer", type=int, default=None)
    g.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    g.add_argument("--beam-width", type=int, default=DEFAULT_BEAM_WIDTH)
    g.add_argument("--decoder", choices=("greedy", "beam"), default="greedy")
    g.add_argument("--lexicon", help="one word per line")
    g.add_argument("--theta", type=float, default=DEFAULT_THETA, help="confidence above which words are kept")
    g.add_argument("--max-snap", type=int, default=1)
    g.add_argument("--min-freq", type=int, default=1)
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--dump-config", action="store_true", help="print the resolved configuration and exit")
    g.add_argument("--config", help="JSON written by --dump-config; explicit flags still win")
    g.add_argument("-v", "--verbose", action="store_true")

    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    gen = sub.add_parser("gen-data", parents=[common], help="render a synthetic manifest")
    gen.add_argument("--count", type=int, default=100)
    gen.add_argument("--alphabet", default="abcdeghkmnrs")
    gen.add_argument("--min-len", type=int, default=1)
    gen.add_argument("--max-len", type=int, default=8)
    gen.add_argument("--augment", action="store_true")
    sub.add_parser("train-teacher", parents=[common], help="train the teacher without distillation")
    sub.add_parser("distill", parents=[common], help="train a student against a frozen teacher")
    sub.add_parser("eval", parents=[common], help="CER/WER/SER on a manifest")
    dec = sub.add_parser("decode", parents=[common], help="transcribe images or a stored lattice")
    dec.add_argument("images", nargs="*")
    dec.add_argument("--lattice", help=".npy log-probability lattice [T, V]")
    dec.add_argument("--charset", help="characters for ids 1..V-1 (with --lattice)")
    att = sub.add_parser("export-attention", parents=[common], help="attention heatmaps for one image")
    att.add_argument("images", nargs=1)
    orc = sub.add_parser("oracle", parents=[common], help="run the CTC/decoder/gradient oracle suites")
    orc.add_argument("--suite", choices=("all", "ctc", "decoder", "gradients"), default="all")
    toy = sub.add_parser("toy-experiment", parents=[common], help="teacher, KD and no-KD students on the toy corpus")
    toy.add_argument("--student-epochs", type=int, default=30, help="per-student budget (--epochs is the teacher's)")
    return p


def _config(ns: argparse.Namespace) -> RunConfig:
    known = set(RunConfig.__dataclass_fields__)
    return RunConfig(**{k: v for k, v in vars(ns).items() if k in known})


def _model_config(rc: RunConfig, preset: str, vocab: int) -> ModelConfig:
    base = PRESETS[preset]
    over = dict(vocab=vocab, height=rc.height, width=rc.width, se_ratio=rc.se_ratio, kernel=rc.kernel,
                pool_2x2_blocks=rc.pool_2x2_blocks, dtype=rc.dtype)
    if rc.aux_layer is not None:
        over["aux_layer"] = rc.aux_layer
    return base.with_(**over)


def _require(value, flag: str):
    if not value:
        raise UsageError(f"{flag} is required")
    if flag in ("--manifest", "--val-manifest", "--lexicon") and not Path(value).exists():
        raise UsageError(f"{flag} {value} does not exist")
    return value


# -- model directories ----------------------------------------------------------------

def save_model(net: Network, charset: Charset, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save(net.params, out / "model.htrj")
    meta = {"config": json.loads(net.config.canonical()), "charset": charset.to_dict()}
    (out / "model.json").write_text(json.dumps(meta, indent=2, ensure_ascii=False), encoding="utf-8")


def load_model(path: str | Path) -> tuple[Network, Charset]:
    d = Path(path)
    if not (d / "model.json").exists():
        raise UsageError(f"{d} is not a model directory (model.json missing)")
    meta = json.loads((d / "model.json").read_text(encoding="utf-8"))
    cfg = ModelConfig(**meta["config"])
    return Network(cfg, load(d / "model.htrj", cfg)), Charset.from_dict(meta["charset"])


# -- commands --------------------------------------------------------------------------

def _render_one(args):
    i, seed, alphabet, lo, hi, height, width, aug = args
    flat = Charset("".join(sorted(set(alphabet), key=ord)), {c: 1 for c in alphabet})
    rng = sample_rng(seed, i)
    text = random_text(flat, int(rng.integers(lo, hi + 1)), rng)
    return make_sample(text, rng, height, width, AugmentSpec() if aug else None, "synthetic", True)


def cmd_gen_data(rc: RunConfig) -> int:
    if rc.count < 0:
        raise UsageError("--count must be non-negative")
    if not 1 <= rc.min_len <= rc.max_len:
        raise UsageError("need 1 <= --min-len <= --max-len")
    jobs = [(i, rc.seed, rc.alphabet, rc.min_len, rc.max_len, rc.height, rc.width, rc.augment)
            for i in range(rc.count)]
    if rc.workers > 1 and jobs:
        with ProcessPoolExecutor(rc.workers) as pool:
            records = list(pool.map(_render_one, jobs, chunksize=16))
    else:
        records = [_render_one(j) for j in jobs]
    path = write_manifest(records, rc.out)
    print(f"wrote {len(records)} lines to {path}")
    return EXIT_OK


def _load_split(path: str, rc: RunConfig, charset: Charset | None = None):
    records = read_manifest(path, rc.height, rc.width)
    if charset is None:
        charset = build_charset([r.text for r in records], rc.min_freq)
    kept = [r for r in records if charset.admits(r.text)]
    return to_dataset(kept, charset), charset


def _train_config(rc: RunConfig, kd: bool) -> TrainConfig:
    return TrainConfig(epochs=rc.epochs, batch_size=rc.batch_size, lr=rc.lr, clip=rc.clip, tau=rc.tau, kd=kd,
                       r0=rc.synthetic_r0, r_max=rc.synthetic_rmax, stage_threshold=rc.stage_threshold,
                       stage_delta=rc.stage_delta, patience=rc.patience, min_delta=rc.min_delta,
                       task_weighting=rc.task_weighting, curriculum=rc.curriculum, seed=rc.seed)


def cmd_train(rc: RunConfig, student_phase: bool) -> int:
    _require(rc.manifest, "--manifest")
    _require(rc.val_manifest, "--val-manifest")
    teacher = None
    charset = None
    if student_phase and rc.kd:
        teacher, charset = load_model(_require(rc.teacher_checkpoint, "--teacher-checkpoint"))
    train_ds, charset = _load_split(rc.manifest, rc, charset)
    val_ds, _ = _load_split(rc.val_manifest, rc, charset)
    preset = rc.student if student_phase else rc.teacher
    net = Network.create(_model_config(rc, preset, charset.vocab_size), rc.seed)
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    pools = Pools(real=train_ds)
    if teacher is not None:
        pools.teacher_real = teacher.logits(train_ds.images)
    res = train(net, pools, val_ds, _train_config(rc, kd=student_phase and rc.kd), charset.decode,
                teacher=teacher, log_path=out / "train_log.jsonl")
    save_model(Network(net.config, res.best), charset, out)
    last = res.log[-1]
    print(f"epochs={len(res.log)} val_cer={last['val_cer']:.6f} stage={last['stage']} out={out}")
    return EXIT_OK


def _decode_all(net: Network, charset: Charset, images: np.ndarray, rc: RunConfig,
                lexicon: Lexicon | None) -> list[str]:
    lp = net.log_probs(images)
    space = charset.encode(" ")[0] if " " in charset else None
    out = []
    for i in range(lp.shape[1]):
        frame = lp[:, i]
        if rc.decoder == "beam":
            out.append(beam_decode(frame, charset, rc.beam_width, lexicon, rc.max_snap))
            continue
        text = greedy_decode(frame, charset)
        if lexicon is not None:
            conf = word_confidences(frame, space_id=space)
            conf = conf if len(conf) == len(text.split()) else None
            text = lexicon_correct(text, lexicon, conf, rc.theta, rc.max_snap)
        out.append(text)
    return out


def cmd_eval(rc: RunConfig) -> int:
    net, charset = load_model(_require(rc.checkpoint, "--checkpoint"))
    ds, _ = _load_split(_require(rc.manifest, "--manifest"), rc, charset)
    lexicon = Lexicon.load(_require(rc.lexicon, "--lexicon"), rc.max_snap) if rc.lexicon else None
    raw = _decode_all(net, charset, ds.images, rc, None)
    hyps = _decode_all(net, charset, ds.images, rc, lexicon) if lexicon else raw
    report = metrics(ds.texts, hyps)
    report.corrections = [(a, b) for a, b in zip(raw, hyps) if a != b]
    text = report.to_text()
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_decode(rc: RunConfig) -> int:
    if rc.lattice:
        lp = np.load(rc.lattice)
        chars = rc.charset if rc.charset is not None else "".join(chr(ord("a") + i) for i in range(lp.shape[1] - 1))
        table = [""] + list(chars)
        if rc.decoder == "beam":
            print(beam_decode(lp, table, rc.beam_width))
        else:
            print(greedy_decode(lp, table))
        return EXIT_OK
    if not rc.images:
        raise UsageError("give image paths or --lattice")
    net, charset = load_model(_require(rc.checkpoint, "--checkpoint"))
    imgs = np.stack([normalize_image(read_pgm(p).astype(np.float64), net.config.height, net.config.width)
                     for p in rc.images]).astype(net.config.dtype)
    lexicon = Lexicon.load(rc.lexicon, rc.max_snap) if rc.lexicon else None
    for path, text in zip(rc.images, _decode_all(net, charset, imgs, rc, lexicon)):
        print(f"{path}\t{text}")
    return EXIT_OK


def cmd_export_attention(rc: RunConfig) -> int:
    net, _ = load_model(_require(rc.checkpoint, "--checkpoint"))
    img = normalize_image(read_pgm(rc.images[0]).astype(np.float64), net.config.height, net.config.width)
    att = net(img[None].astype(net.config.dtype)).attention
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    for stage, w in att.items():
        for h in range(w.shape[1]):
            csv, pgm = export_attention(w[0, h], out / f"{stage}_head{h}")
            print(f"{csv}\n{pgm}")
    return EXIT_OK


def cmd_oracle(rc: RunConfig) -> int:
    from .oracles import SUITES

    names = list(SUITES) if rc.suite == "all" else [rc.suite]
    ok = True
    for n in names:
        r = SUITES[n]()
        print(r.line())
        ok &= r.passed
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_toy(rc: RunConfig) -> int:
    from .experiment import ToyConfig, run_toy_experiment

    cfg = ToyConfig(teacher_epochs=rc.epochs, student_epochs=rc.student_epochs, tau=rc.tau,
                    r0=rc.synthetic_r0, r_max=rc.synthetic_rmax,
                    stage_threshold=rc.stage_threshold, stage_delta=rc.stage_delta, lr=rc.lr,
                    batch_size=rc.batch_size, teacher=PRESETS[rc.teacher], student=PRESETS[rc.student])
    res = run_toy_experiment(cfg, rc.out)
    print(json.dumps(res.summary(), indent=2))
    return EXIT_OK


def _parse(argv: Sequence[str] | None) -> argparse.Namespace:
    parser = _parser()
    ns = parser.parse_args(argv)
    if not ns.config:
        return ns
    try:
        saved = json.loads(Path(ns.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        parser.error(f"cannot read --config {ns.config}: {e}")
    if saved.get("command", ns.command) != ns.command:
        parser.error(f"--config was dumped for {saved['command']!r}, not {ns.command!r}")
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[ns.command]
    unknown = set(saved) - set(RunConfig.__dataclass_fields__)
    if unknown:
        parser.error(f"--config has unknown keys {sorted(unknown)}")
    sub.set_defaults(**{k: v for k, v in saved.items() if k != "command"})
    return parser.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    ns = _parse(argv)
    rc = _config(ns)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if ns.dump_config:
        print(json.dumps(asdict(rc), indent=2, sort_keys=True))
        return EXIT_OK
    handlers = {
        "gen-data": cmd_gen_data,
        "train-teacher": lambda r: cmd_train(r, student_phase=False),
        "distill": lambda r: cmd_train(r, student_phase=True),
        "eval": cmd_eval,
        "decode": cmd_decode,
        "export-attention": cmd_export_attention,
        "oracle": cmd_oracle,
        "toy-experiment": cmd_toy,
    }
    try:
        return handlers[rc.command](rc)
    except UsageError as e:
        print(f"error: kind=usage message={json.dumps(str(e))}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - surfaced as one line
        print(f"error: kind=runtime type={type(e).__name__} message={json.dumps(str(e))}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
