"""The desk-scale distillation experiment: train a teacher on a rendered toy
corpus, then distill students with and without the KD term."""

from __future__ import annotations

import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    AugmentSpec,
    Charset,
    Dataset,
    augment,
    build_charset,
    generate_synthetic,
    make_toy_corpus,
    sample_rng,
    synthetic_count,
    to_dataset,
)
from .evaluation import metrics
from .model import TOY_STUDENT, TOY_TEACHER, ModelConfig, ParameterStore, save
from .train import Network, Pools, TrainConfig, greedy_texts, train

log = logging.getLogger(__name__)

TOY_ALPHABET = "abcdeghkmnrs"


@dataclass
class ToyConfig:
    lines: int = 2000
    alphabet: str = TOY_ALPHABET
    length_range: tuple[int, int] = (1, 8)
    height: int = 32
    width: int = 256
    split: tuple[int, int, int] = (1200, 200, 600)
    teacher_epochs: int = 30
    student_epochs: int = 30
    seeds: tuple[int, ...] = (0, 1, 2)
    teacher_seed: int = 0
    corpus_seed: int = 1234
    batch_size: int = 32
    lr: float = 1e-3
    tau: float = 2.0
    r0: float = 0.1
    r_max: float = 0.4
    stage_threshold: float = 0.75
    stage_delta: float = 0.05
    teacher: ModelConfig = TOY_TEACHER
    student: ModelConfig = TOY_STUDENT


@dataclass
class StudentRun:
    seed: int
    kd: bool
    test_cer: float
    test_wer: float
    test_ser: float
    log: list[dict]
    params: ParameterStore = field(repr=False)


@dataclass
class ToyResult:
    charset: Charset
    teacher_val_cer: float
    teacher_test_cer: float
    teacher_log: list[dict]
    teacher_params: ParameterStore = field(repr=False)
    students: list[StudentRun] = field(default_factory=list)
    seconds: float = 0.0

    def median_cer(self, kd: bool) -> float:
        return statistics.median(r.test_cer for r in self.students if r.kd == kd)

    def summary(self) -> dict:
        return {
            "teacher_val_cer": self.teacher_val_cer,
            "teacher_test_cer": self.teacher_test_cer,
            "kd_test_cer": {r.seed: r.test_cer for r in self.students if r.kd},
            "no_kd_test_cer": {r.seed: r.test_cer for r in self.students if not r.kd},
            "kd_median": self.median_cer(True),
            "no_kd_median": self.median_cer(False),
            "seconds": self.seconds,
        }


def build_toy_data(cfg: ToyConfig):
    """Corpus, charset and the train/val/test datasets plus augmentation and
    synthetic pools."""
    records = make_toy_corpus(cfg.lines, cfg.alphabet, cfg.length_range, cfg.corpus_seed,
                              cfg.height, cfg.width)
    charset = build_charset([r.text for r in records])
    n_tr, n_va, n_te = cfg.split
    if n_tr + n_va + n_te != cfg.lines:
        raise ValueError("split sizes must add up to the corpus size")
    train_ds = to_dataset(records[:n_tr], charset)
    val_ds = to_dataset(records[n_tr:n_tr + n_va], charset)
    test_ds = to_dataset(records[n_tr + n_va:], charset)
    spec = AugmentSpec()
    aug = np.stack([augment(img, spec, sample_rng(cfg.corpus_seed + 1, i))
                    for i, img in enumerate(train_ds.images)]).astype(np.float32)
    syn = generate_synthetic(charset, synthetic_count(n_tr, cfg.r_max), cfg.length_range,
                             cfg.corpus_seed + 2, cfg.height, cfg.width, spec)
    pools = Pools(real=train_ds, augmented=aug, synthetic=to_dataset(syn, charset))
    return charset, pools, val_ds, test_ds


def _test(net: Network, ds: Dataset, charset: Charset):
    return metrics(ds.texts, greedy_texts(net.log_probs(ds.images), charset.decode))


def _train_cfg(cfg: ToyConfig, epochs: int, kd: bool, seed: int) -> TrainConfig:
    return TrainConfig(epochs=epochs, batch_size=cfg.batch_size, lr=cfg.lr, tau=cfg.tau, kd=kd,
                       r0=cfg.r0, r_max=cfg.r_max, stage_threshold=cfg.stage_threshold,
                       stage_delta=cfg.stage_delta, seed=seed)


def run_toy_experiment(cfg: ToyConfig | None = None, out_dir: str | Path | None = None) -> ToyResult:
    """Teacher (no KD) first, then for each seed a KD student and an
    identically budgeted no-KD student, all scored on the held-out test split."""
    cfg = cfg or ToyConfig()
    t0 = time.perf_counter()
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    charset, pools, val_ds, test_ds = build_toy_data(cfg)
    teacher_cfg = cfg.teacher.with_(vocab=charset.vocab_size, height=cfg.height, width=cfg.width)
    student_cfg = cfg.student.with_(vocab=charset.vocab_size, height=cfg.height, width=cfg.width)

    teacher = Network.create(teacher_cfg, cfg.teacher_seed)
    res = train(teacher, pools, val_ds, _train_cfg(cfg, cfg.teacher_epochs, False, cfg.teacher_seed),
                charset.decode, log_path=out / "teacher.jsonl" if out else None)
    teacher = Network(teacher_cfg, res.best)
    teacher_val = _test(teacher, val_ds, charset).cer
    teacher_test = _test(teacher, test_ds, charset).cer
    log.info("teacher val CER %.4f test CER %.4f", teacher_val, teacher_test)
    if out:
        save(res.best, out / "teacher.htrj")

    # the teacher is frozen, so its logits are computed once per image
    pools.teacher_real = teacher.logits(pools.real.images)
    pools.teacher_aug = teacher.logits(pools.augmented)
    pools.teacher_syn = teacher.logits(pools.synthetic.images)

    result = ToyResult(charset, teacher_val, teacher_test, res.log, res.best)
    for seed in cfg.seeds:
        for kd in (True, False):
            student = Network.create(student_cfg, 1000 + seed)
            tag = f"student_{'kd' if kd else 'nokd'}_seed{seed}"
            sres = train(student, pools, val_ds, _train_cfg(cfg, cfg.student_epochs, kd, seed),
                         charset.decode, log_path=out / f"{tag}.jsonl" if out else None)
            best = Network(student_cfg, sres.best)
            rep = _test(best, test_ds, charset)
            log.info("%s test CER %.4f", tag, rep.cer)
            result.students.append(StudentRun(seed, kd, rep.cer, rep.wer, rep.ser, sres.log, sres.best))
            if out:
                save(sres.best, out / f"{tag}.htrj")
    result.seconds = time.perf_counter() - t0
    if out:
        (out / "summary.json").write_text(json.dumps(result.summary(), indent=2))
    return result
