"""Error-amplification diagnostics and the robustness sweep harness.

The central quantity is the normalized activation distance
||A - A_adv|| / ||A|| measured at every block boundary: growth with depth
is the amplification effect that pushes perturbed activations across
quantization buckets. The sweep trains one model per (bits, beta) cell,
evaluates the configured attacks, and reports a long-form accuracy table
plus the quantize-gain summary.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import AttackConfig, batch_attack_config, run_attack
from .models import Model, ModelSpec, build_model, default_spec
from .quantize import QuantConfig
from .seeds import split_seed
from .tensor import Tensor, no_grad
from .training import TrainConfig, train


class DegenerateActivationError(ValueError):
    """Clean activation has zero norm; the normalized distance is undefined."""


def normalized_distance(a: np.ndarray, a_adv: np.ndarray) -> float:
    """||a - a_adv||_2 / ||a||_2 over all elements, 64-bit accumulation."""
    a = np.asarray(a)
    a_adv = np.asarray(a_adv)
    if a.shape != a_adv.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {a_adv.shape}")
    ref = np.linalg.norm(a.astype(np.float64).ravel())
    if ref == 0.0:
        raise DegenerateActivationError("clean activation has zero norm")
    return float(np.linalg.norm((a.astype(np.float64) - a_adv.astype(np.float64)).ravel()) / ref)


@dataclass
class AmplificationProfile:
    layer_names: list[str]
    distances: list[float]
    eps: float
    quantized: bool = True

    def __post_init__(self):
        if len(self.layer_names) != len(self.distances):
            raise ValueError("one distance per layer required")
        if any(d < 0 for d in self.distances):
            raise ValueError("distances must be non-negative")

    def final_distance(self) -> float:
        return self.distances[-1]


def layer_profile(model: Model, x: np.ndarray, x_adv: np.ndarray,
                  quant_on: bool = True, eps: float = 0.0) -> AmplificationProfile:
    """Normalized distance at every block boundary for a clean/perturbed pair.

    quant_on=False reruns both passes with the activation snap disabled
    (clamp only), isolating what quantization does to the same weights.
    """
    if x.shape != x_adv.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_adv.shape}")
    override = None if quant_on else replace(model.spec.quant, mode="off")
    caps_clean: list = []
    caps_adv: list = []
    with no_grad():
        model.forward(Tensor(x), train=False, quant_override=override, capture=caps_clean)
        model.forward(Tensor(x_adv), train=False, quant_override=override, capture=caps_adv)
    names = []
    dists = []
    for (name, a), (_, a_adv) in zip(caps_clean, caps_adv):
        try:
            dists.append(normalized_distance(a, a_adv))
        except DegenerateActivationError as e:
            raise DegenerateActivationError(f"{name}: {e}") from e
        names.append(name)
    return AmplificationProfile(names, dists, eps=eps, quantized=quant_on)


def profile_to_rows(profile: AmplificationProfile) -> list[list]:
    return [[i, name, repr(float(profile.eps)), int(profile.quantized), repr(d)]
            for i, (name, d) in enumerate(zip(profile.layer_names, profile.distances), start=1)]


PROFILE_HEADER = ["layer_index", "layer_name", "eps", "quantized", "distance"]


def write_profiles_csv(path, profiles: list[AmplificationProfile]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(PROFILE_HEADER)
        for p in profiles:
            w.writerows(profile_to_rows(p))


def read_profiles_csv(path) -> list[AmplificationProfile]:
    """Inverse of write_profiles_csv; groups rows by (eps, quantized)."""
    groups: dict[tuple, AmplificationProfile] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            key = (float(row["eps"]), bool(int(row["quantized"])))
            prof = groups.setdefault(key, AmplificationProfile([], [], key[0], key[1]))
            prof.layer_names.append(row["layer_name"])
            prof.distances.append(float(row["distance"]))
    return list(groups.values())


def spearman(xs, ys) -> float:
    """Rank correlation with average ranks for ties."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or xs.size < 2:
        raise ValueError("need two equal-length vectors of size >= 2")
    rx, ry = _avg_ranks(xs), _avg_ranks(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0.0:
        return 0.0
    return float((rx * ry).sum() / denom)


def _avg_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    sv = v[order]
    while i < v.size:
        j = i
        while j + 1 < v.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def evaluate(model: Model, dataset, attack: AttackConfig | None = None,
             batch_size: int = 256) -> float:
    """Accuracy in percent on (attacked) inputs, eval mode."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    correct = 0
    for bi, s in enumerate(range(0, len(dataset), batch_size)):
        xb = dataset.images[s:s + batch_size]
        yb = dataset.labels[s:s + batch_size]
        if attack is not None and attack.epsilon > 0:
            xb = run_attack(model, xb, yb, batch_attack_config(attack, bi))
        pred = model.predict(xb, batch_size=batch_size)
        correct += int((pred == yb).sum())
    return 100.0 * correct / len(dataset)


# ---------------------------------------------------------------------------
# sweep


REPORT_HEADER = ["model_tag", "bits", "beta", "attack", "eps", "accuracy"]


@dataclass
class RobustnessReport:
    """Long-form accuracy records: one row per (cell, attack)."""

    records: list[dict] = field(default_factory=list)
    complete: bool = True

    def add(self, model_tag: str, bits: int, beta: float, attack: str,
            eps: float, accuracy: float | None):
        self.records.append(dict(model_tag=model_tag, bits=bits, beta=beta,
                                 attack=attack, eps=eps, accuracy=accuracy))

    def lookup(self, model_tag: str, bits: int, beta: float, attack: str) -> float | None:
        for r in self.records:
            if (r["model_tag"], r["bits"], r["attack"]) == (model_tag, bits, attack) \
                    and r["beta"] == beta:
                return r["accuracy"]
        return None

    def quantize_gain(self, model_tag: str, beta: float, attack: str) -> float | None:
        """Best quantized adversarial accuracy minus the full-precision one."""
        fp = self.lookup(model_tag, 0, beta, attack)
        quantized = [r["accuracy"] for r in self.records
                     if r["model_tag"] == model_tag and r["beta"] == beta
                     and r["attack"] == attack and r["bits"] > 0
                     and r["accuracy"] is not None]
        if fp is None or not quantized:
            return None
        return max(quantized) - fp

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(REPORT_HEADER)
            for r in self.records:
                acc = "" if r["accuracy"] is None else repr(r["accuracy"])
                w.writerow([r["model_tag"], r["bits"], repr(r["beta"]),
                            r["attack"], repr(r["eps"]), acc])

    @classmethod
    def from_csv(cls, path) -> "RobustnessReport":
        rep = cls()
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                acc = None if row["accuracy"] == "" else float(row["accuracy"])
                rep.add(row["model_tag"], int(row["bits"]), float(row["beta"]),
                        row["attack"], float(row["eps"]), acc)
        rep.complete = all(r["accuracy"] is not None for r in rep.records)
        return rep


@dataclass
class SweepGrid:
    """Cell axes plus the shared train/eval recipe for one sweep."""

    bits: tuple = (1, 2, 3, 4, 5)
    betas: tuple = (0.0,)
    attacks: tuple = (("fgsm", 8.0),)  # (kind, eps) pairs
    seeds: tuple = (0,)
    include_fp: bool = True
    quant_mode: str = "uniform"
    range_max: float = 6.0

    def cells(self) -> list[tuple[int, float]]:
        bit_axis = ((0,) if self.include_fp else ()) + tuple(self.bits)
        return [(b, beta) for beta in self.betas for b in bit_axis]


def cell_tag(beta: float) -> str:
    return "vanilla" if beta == 0.0 else "dq"


def _cell_key(bits: int, beta: float, seed: int) -> str:
    return f"b{bits}_beta{beta:g}_s{seed}"


def _train_and_eval_cell(args):
    (bits, beta, seed, grid, spec_base, train_cfg, train_data, test_data, out_dir) = args
    quant = QuantConfig(bits=max(bits, 1), range_max=grid.range_max,
                        mode="off" if bits == 0 else grid.quant_mode)
    reg = replace(spec_base.reg, beta=beta)
    spec = replace(spec_base, quant=quant, reg=reg)
    cell_seed = split_seed(seed, f"cell/{_cell_key(bits, beta, seed)}")
    model = build_model(spec, seed=cell_seed)
    cfg = replace(train_cfg, seed=cell_seed)
    train(model, train_data, cfg)
    accs = {"clean": evaluate(model, test_data)}
    for kind, eps in grid.attacks:
        atk = AttackConfig(kind=kind, epsilon=eps, seed=split_seed(cell_seed, f"eval/{kind}"))
        accs[f"{kind}:{eps:g}"] = evaluate(model, test_data, atk)
    ckpt = None
    if out_dir is not None:
        ckpt = os.path.join(out_dir, f"{_cell_key(bits, beta, seed)}.dqw")
        model.save(ckpt)
    return {"bits": bits, "beta": beta, "seed": seed, "accs": accs, "checkpoint": ckpt}


def sweep(grid: SweepGrid, train_data, test_data,
          spec_base: ModelSpec | None = None,
          train_cfg: TrainConfig | None = None,
          out_dir=None, workers: int = 1) -> RobustnessReport:
    """Train and evaluate every (bits, beta) cell; seeds are averaged.

    Cell results are cached as JSON next to their checkpoints, keyed by a
    config checksum, so an interrupted sweep resumes instead of retraining.
    Failed cells produce rows with an empty accuracy and mark the report
    incomplete rather than disappearing.
    """
    if not grid.cells():
        raise ValueError("empty sweep grid")
    spec_base = spec_base if spec_base is not None else default_spec()
    train_cfg = train_cfg if train_cfg is not None else TrainConfig()
    cell_dir = None
    if out_dir is not None:
        cell_dir = os.path.join(out_dir, "cells")
        os.makedirs(cell_dir, exist_ok=True)

    checksum = _grid_checksum(grid, spec_base, train_cfg)
    jobs = []
    done: dict[tuple, dict] = {}
    for bits, beta in grid.cells():
        for seed in grid.seeds:
            cached = _load_cell(cell_dir, bits, beta, seed, checksum)
            if cached is not None:
                done[(bits, beta, seed)] = cached
            else:
                jobs.append((bits, beta, seed, grid, spec_base, train_cfg,
                             train_data, test_data, cell_dir))

    failures = []
    results = _run_jobs(jobs, workers, failures)
    for res in results:
        done[(res["bits"], res["beta"], res["seed"])] = res
        _store_cell(cell_dir, res, checksum)

    report = RobustnessReport()
    attack_cols = ["clean"] + [f"{kind}:{eps:g}" for kind, eps in grid.attacks]
    for bits, beta in grid.cells():
        per_seed = [done.get((bits, beta, s)) for s in grid.seeds]
        for col in attack_cols:
            vals = [r["accs"][col] for r in per_seed if r is not None]
            acc = float(np.mean(vals)) if len(vals) == len(grid.seeds) else None
            kind, _, eps = col.partition(":")
            report.add(cell_tag(beta), bits, beta, kind, float(eps or 0.0), acc)
    report.complete = not failures and all(r["accuracy"] is not None for r in report.records)
    if out_dir is not None:
        report.to_csv(os.path.join(out_dir, "report.csv"))
        write_summary_csv(os.path.join(out_dir, "table.csv"), report, grid)
    return report


def _run_jobs(jobs, workers, failures):
    results = []
    if workers > 1 and len(jobs) > 1:
        import multiprocessing as mp
        try:
            ctx = mp.get_context("fork")
        except ValueError:  # platform without fork: stay serial
            ctx = None
        if ctx is not None:
            with ctx.Pool(workers) as pool:
                for res in pool.imap_unordered(_cell_worker, jobs):
                    if isinstance(res, dict):
                        results.append(res)
                    else:
                        failures.append(res)
            return results
    for job in jobs:
        try:
            results.append(_train_and_eval_cell(job))
        except Exception as e:  # cell failures land in the report, not the stack
            failures.append((job[:3], repr(e)))
    return results


def _cell_worker(job):
    try:
        return _train_and_eval_cell(job)
    except Exception as e:  # cell failures land in the report, not the stack
        return (job[:3], repr(e))


def _grid_checksum(grid, spec, train_cfg) -> str:
    import hashlib
    blob = json.dumps([repr(grid), repr(spec), repr(train_cfg)], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _cell_json(cell_dir, bits, beta, seed):
    return os.path.join(cell_dir, f"{_cell_key(bits, beta, seed)}.json")


def _load_cell(cell_dir, bits, beta, seed, checksum):
    if cell_dir is None:
        return None
    path = _cell_json(cell_dir, bits, beta, seed)
    if not os.path.exists(path):
        return None
    with open(path) as f:
        blob = json.load(f)
    if blob.get("checksum") != checksum:
        return None
    return blob["result"]


def _store_cell(cell_dir, res, checksum):
    if cell_dir is None:
        return
    with open(_cell_json(cell_dir, res["bits"], res["beta"], res["seed"]), "w") as f:
        json.dump({"checksum": checksum, "result": res}, f)


def write_summary_csv(path, report: RobustnessReport, grid: SweepGrid):
    """Pivoted accuracy table: full precision, each bit width, quantize gain."""
    bit_axis = list(grid.bits)
    attacks = ["clean"] + [kind for kind, _ in grid.attacks]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model_tag", "beta", "attack", "full_prec"]
                   + [f"bit_{b}" for b in bit_axis] + ["quantize_gain", "best_acc"])
        for beta in grid.betas:
            tag = cell_tag(beta)
            for atk in attacks:
                fp = report.lookup(tag, 0, beta, atk)
                per_bit = [report.lookup(tag, b, beta, atk) for b in bit_axis]
                gain = report.quantize_gain(tag, beta, atk)
                known = [a for a in [fp] + per_bit if a is not None]
                best = max(known) if known else None

                def fmt(v):
                    return "" if v is None else f"{v:.2f}"

                w.writerow([tag, repr(beta), atk, fmt(fp)]
                           + [fmt(a) for a in per_bit] + [fmt(gain), fmt(best)])
