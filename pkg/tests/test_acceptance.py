"""Acceptance criteria 1-11, one test each, with a PASS/FAIL line per criterion in the summary."""

import contextlib
import copy
import json
import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import ndimage

from multilevel_clip.cli import OUTPUT_ROOT_ENV, main
from multilevel_clip.curation import (
    AntonymDictionary,
    ClusterConfig,
    cluster_objects,
    generate_negative_triplets,
    mutual_reachability,
)
from multilevel_clip.curation.embedding import CharNgramEmbedder
from multilevel_clip.encoders import (
    EncoderConfig,
    ScenarioModel,
    Tokenizer,
    forward_batch,
    record_tensors,
)
from multilevel_clip.evaluation import MetricsReport, dice_score, iou_score
from multilevel_clip.objectives import (
    EMAState,
    contrastive_loss,
    ema_update,
    kd_loss,
    kd_terms,
    kl_embedding_divergence,
    total_loss,
)
from multilevel_clip.synth import SceneConfig, gaussian_blur, generate_scene, rbf_mask
from multilevel_clip.training import LambdaSchedule, lambda_kd, lr_at_step

from conftest import ACCEPTANCE, small_encoder_config, words_for
from oracles import (
    LABELS_30,
    brute_mreach,
    oracle_clip,
    oracle_kl,
    oracle_lambda,
    oracle_lr,
    oracle_partition,
)

ROOT = Path(__file__).resolve().parents[1]
DESK_CONFIG = ROOT / "configs" / "desk.toml"
ENCODERS = ("vision_global", "vision_object", "vision_relation",
            "text_global", "text_object", "text_relation")


@contextlib.contextmanager
def criterion(number, title):
    """Record a PASS/FAIL line for ``number``; ``notes`` collects measured values."""
    notes = []
    start = time.perf_counter()
    try:
        yield notes
    except BaseException:
        status = "FAIL"
        raise
    else:
        status = "PASS"
    finally:
        elapsed = time.perf_counter() - start
        detail = "; ".join(notes)
        ACCEPTANCE[number] = (f"criterion {number:>2} {status}  {title}"
                              f"{'  (' + detail + ')' if detail else ''}  [{elapsed:.1f}s]")
        print(ACCEPTANCE[number])


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def run_cli(root, monkeypatch, *argv):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(root))
    code = main(list(argv))
    assert code == 0, f"{' '.join(argv)} exited with {code}"


# ------------------------------------------------------------ criterion 1

def test_criterion_01_formula_oracles():
    with criterion(1, "formula oracles match brute-force evaluations") as notes:
        start = time.perf_counter()
        worst = {}

        def check(name, got, want, tol=1e-9):
            err = rel_err(float(got), float(want)) if want != 0 else abs(float(got))
            worst[name] = max(worst.get(name, 0.0), err)
            assert err <= tol, f"{name}: {got} vs {want}"

        for cx, cy, sigma, shape in [(2, 3, 1.0, (5, 6)), (0.5, 0.5, 2.5, (4, 4)),
                                     (10, -3, 6.0, (8, 9)), (3.3, 1.7, 0.4, (6, 5)),
                                     (7, 7, 12.0, (16, 16))]:
            m = rbf_mask((cx, cy), sigma, shape)
            for r in range(shape[0]):
                for c in range(shape[1]):
                    want = math.exp(-((c - cx) ** 2 + (r - cy) ** 2) / (2 * sigma ** 2))
                    check("rbf_mask", m[r, c], want)

        rng = np.random.default_rng(0)
        for sigma in (0.5, 1.0, 1.7, 3.0, 4.2):
            img = rng.random((20, 23, 3))
            want = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect", truncate=3.0)
            got = gaussian_blur(img, sigma)
            err = float(np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-12)))
            worst["gaussian_blur"] = max(worst.get("gaussian_blur", 0.0), err)
            assert err <= 1e-6

        for seed in range(5):
            t, s = rng.normal(size=5 + seed), rng.normal(size=5 + seed)
            tau = 0.3 + 0.7 * seed
            check("kl_embedding_divergence",
                  kl_embedding_divergence(torch.tensor(t), torch.tensor(s), tau),
                  oracle_kl(t.tolist(), s.tolist(), tau))
        check("kl_embedding_divergence",
              kl_embedding_divergence(torch.tensor([math.log(2.0), 0.0], dtype=torch.float64),
                                      torch.zeros(2, dtype=torch.float64), 1.0),
              (2 / 3) * math.log(4 / 3) + (1 / 3) * math.log(2 / 3))

        for seed in range(5):
            n = 2 + seed
            img, txt = rng.normal(size=(n, 6)), rng.normal(size=(n, 6))
            temp = 0.05 + 0.3 * seed
            check("contrastive_loss", contrastive_loss(torch.tensor(img), torch.tensor(txt), temp),
                  oracle_clip(img.tolist(), txt.tolist(), temp))
        check("contrastive_loss", contrastive_loss(torch.eye(2, dtype=torch.float64),
                                                   torch.eye(2, dtype=torch.float64), 1.0),
              math.log1p(math.exp(-1.0)))

        a1, a10 = LambdaSchedule.parse("anneal:1-0"), LambdaSchedule.parse("anneal:10-0")
        for p in (0.1, 0.4, 0.5, 0.55, 0.69, 0.7, 0.85, 0.99, 1.0):
            for sched, args in ((a1, (1.0, 0.5, 0.0)), (a10, (10.0, 1.0, 0.0))):
                check("lambda_kd", lambda_kd(p, sched), oracle_lambda(p, *args))

        for step, total, base, frac in [(0, 100, 2e-5, 0.1), (5, 100, 2e-5, 0.1),
                                        (10, 100, 2e-5, 0.1), (57, 100, 1e-3, 0.1),
                                        (98, 100, 1e-3, 0.1), (333, 1000, 1e-3, 0.25)]:
            check("lr_at_step", lr_at_step(step, total, base, frac), oracle_lr(step, total, base, frac))

        for seed in range(5):
            pts = np.random.default_rng(seed).normal(size=(7, 3))
            k = 1 + seed % 3
            for a, b in [(0, 1), (2, 5), (3, 3), (6, 4)]:
                check("mutual_reachability", mutual_reachability(a, b, k, pts),
                      brute_mreach(pts, a, b, k))

        elapsed = time.perf_counter() - start
        notes.append(", ".join(f"{k} max rel err {v:.1e}" for k, v in sorted(worst.items())))
        notes.append(f"runtime {elapsed:.2f}s < 10s")
        assert elapsed < 10.0


# ------------------------------------------------------------ criterion 2

def test_criterion_02_gradient_checks():
    with criterion(2, "total_loss gradients match central differences") as notes:
        start = time.perf_counter()
        cfg = SceneConfig(image_size=64)
        records = [generate_scene(cfg, seed=(31, i), scene_id=f"g{i}") for i in range(4)]
        torch.manual_seed(0)
        enc = EncoderConfig(embed_dim=64, depth=2, heads=4, patch_size=8, image_size=64,
                            crop_size=32)
        student = ScenarioModel(enc, Tokenizer(words_for(records))).double()
        teacher = copy.deepcopy(student)
        with torch.no_grad():
            for p in teacher.parameters():
                p.add_(0.02 * torch.randn_like(p))
        items = [record_tensors(r, enc) for r in records]
        with torch.no_grad():
            t_batch = forward_batch(teacher, items)

        def loss():
            s_batch = forward_batch(student, items)
            return total_loss(s_batch, t_batch, 1.0, 1.0, student.temperatures,
                              student.kd_temperature).total

        student.zero_grad()
        loss().backward()
        gen = np.random.default_rng(2)
        h, worst, n = 1e-5, 0.0, 0
        for i in range(20):
            module = getattr(student, ENCODERS[i % 6])
            named = [(nm, p) for nm, p in module.named_parameters()]
            name, param = named[gen.integers(len(named))]
            idx = tuple(int(gen.integers(s)) for s in param.shape)
            analytic = float(param.grad[idx])
            with torch.no_grad():
                orig = float(param[idx])
                param[idx] = orig + h
                up = float(loss())
                param[idx] = orig - h
                down = float(loss())
                param[idx] = orig
            numeric = (up - down) / (2 * h)
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, err)
            n += 1
            assert err <= 1e-4, f"{ENCODERS[i % 6]}.{name}{list(idx)}: {analytic} vs {numeric}"
        elapsed = time.perf_counter() - start
        notes.append(f"{n} parameters over six encoders, max rel err {worst:.1e}")
        notes.append(f"runtime {elapsed:.1f}s < 120s")
        assert elapsed < 120.0


# ------------------------------------------------------------ criterion 3

def test_criterion_03_schedule_fidelity():
    with criterion(3, "lambda_KD plateau, continuity and endpoint") as notes:
        sched = LambdaSchedule.parse("anneal:1-0")
        grid = np.linspace(0.0, 0.4, 4001)
        assert all(lambda_kd(float(p), sched) == 1.0 for p in grid)
        jumps = []
        for bp in (sched.p1, sched.p2):
            jumps.append(abs(lambda_kd(bp, sched) - lambda_kd(math.nextafter(bp, 2.0), sched)))
        assert max(jumps) <= 1e-12
        assert lambda_kd(1.0, sched) == 0.0
        notes.append(f"plateau on {len(grid)} points, max jump {max(jumps):.1e}")


# ------------------------------------------------------------ criterion 4

def test_criterion_04_ema_contract(small_records):
    with criterion(4, "EMA teacher copies during warm-up, then blends") as notes:
        torch.manual_seed(0)
        student = ScenarioModel(small_encoder_config(), Tokenizer(words_for(small_records))).double()
        ema = EMAState.from_student(student)
        assert (ema.decay, ema.warmup_steps) == (0.9995, 2000)
        params = list(student.parameters())
        for step in range(2000):
            with torch.no_grad():
                params[step % len(params)].add_(0.01)
            ema_update(ema, student, step)
            assert all(torch.equal(t, s) for t, s in zip(ema.teacher.parameters(), params))
        with torch.no_grad():
            for p in ema.teacher.parameters():
                p.add_(torch.randn_like(p))
        before = [t.clone() for t in ema.teacher.parameters()]
        ema_update(ema, student, 2000)
        with torch.no_grad():
            worst = max(float((t - (0.9995 * b + 0.0005 * s)).abs().max())
                        for t, b, s in zip(ema.teacher.parameters(), before, params))
        assert worst <= 1e-12
        notes.append(f"2000 bitwise warm-up steps; post-warm-up max deviation {worst:.1e}")


# ------------------------------------------------------------ criterion 5

def _accumulate_leaves(tensor):
    seen, stack, leaves = set(), [tensor.grad_fn], []
    while stack:
        fn = stack.pop()
        if fn is None or fn in seen:
            continue
        seen.add(fn)
        if hasattr(fn, "variable"):
            leaves.append(fn.variable)
        stack.extend(nxt for nxt, _ in fn.next_functions)
    return leaves


def test_criterion_05_kd_structure(small_model, small_records):
    with criterion(5, "KD is a sum of 2(n_O+n_R) non-negative terms, teacher detached") as notes:
        small_model.train()
        ema = EMAState.from_student(small_model)
        with torch.no_grad():
            for p in ema.teacher.parameters():
                p.add_(0.05 * torch.randn_like(p))
        items = [record_tensors(r, small_model.config) for r in small_records[:4]]
        student = forward_batch(small_model, items)
        teacher = forward_batch(ema.teacher, items)
        total = 0
        for s, t in zip(student.scenes(), teacher.scenes()):
            terms = kd_terms(s, t, small_model.kd_temperature)
            assert terms.shape == (2 * (s.n_O + s.n_R),)
            assert bool((terms >= 0).all())
            assert float(kd_loss(s, t, small_model.kd_temperature).detach()) == pytest.approx(
                float(terms.sum().detach()), rel=1e-12)
            total += terms.numel()
            teacher_ids = {id(p) for p in ema.teacher.parameters()}
            assert not any(id(v) in teacher_ids for v in _accumulate_leaves(terms.sum()))
        out = sum(kd_loss(s, t, small_model.kd_temperature)
                  for s, t in zip(student.scenes(), teacher.scenes()))
        out.backward()
        assert all(p.grad is None for p in ema.teacher.parameters())
        assert small_model.vision_object.proj.weight.grad is not None
        notes.append(f"{total} terms over 4 scenes; no teacher leaf in the autograd graph")


# ------------------------------------------------------------ criterion 6

def test_criterion_06_alignment_shapes(small_model, small_records):
    with criterion(6, "alignment matrices are BxB, sum n_O, sum n_R (+negatives)") as notes:
        items = [record_tensors(r, small_model.config) for r in small_records[:4]]
        with torch.no_grad():
            batch = forward_batch(small_model, items)
            out = total_loss(batch, None, 0.0, 1.0, small_model.temperatures,
                             small_model.kd_temperature)
        n_o = sum(r.n_objects for r in small_records[:4])
        n_r = sum(r.n_relations for r in small_records[:4])
        k = max(len(rel.negatives) for r in small_records[:4] for rel in r.relations)
        want = {"global": (4, 4), "object": (n_o, n_o), "relation_i2t": (n_r, n_r + k),
                "relation_t2i": (n_r, n_r)}
        assert out.alignment_shapes == want
        notes.append(", ".join(f"{key} {a}x{b}" for key, (a, b) in want.items()))


# ------------------------------------------------------------ criterion 7

@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    start = time.perf_counter()
    with pytest.MonkeyPatch.context() as mp:
        run_cli(root, mp, "generate", "--config", str(DESK_CONFIG))
        run_cli(root, mp, "train", "--config", str(DESK_CONFIG))
        run_cli(root, mp, "eval", "--config", str(DESK_CONFIG), "--tasks", "zeroshot")
    return root, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_07_learning_signal(desk_run):
    with criterion(7, "desk-scale zero-shot Top-1 >= 5x chance, loss halves") as notes:
        root, elapsed = desk_run
        log = [json.loads(line) for line in
               (root / "checkpoints" / "model.metrics.jsonl").read_text().splitlines()]
        epochs = sorted({r["epoch"] for r in log})
        mean = lambda e: float(np.mean([r["L_total"] for r in log if r["epoch"] == e]))
        first, last = mean(epochs[0]), mean(epochs[-1])
        notes.append(f"{len(epochs)} epochs, loss {first:.3f} -> {last:.3f} "
                     f"(ratio {last / first:.3f} < 0.5)")
        ok = last < 0.5 * first
        for name in ("actions", "objects", "relations"):
            rep = MetricsReport.load(root / "reports" / f"zeroshot_{name}.json")
            chance = rep.metrics["chance_top1"]
            top1 = rep.metrics["top1"]
            notes.append(f"{name} top1 {top1:.3f} vs 5x chance {5 * chance:.3f} "
                         f"(C={rep.config['n_classes']})")
            ok = ok and top1 >= 5 * chance
        notes.append(f"runtime {elapsed:.0f}s < 1800s")
        assert elapsed < 1800
        assert ok, "; ".join(notes)


# ------------------------------------------------------------ criterion 8

ABLATION_CONFIG = """\
seed = 0
output_root = "unused"

[scene]
n_scenes = 600
image_size = 32

[encoder]
embed_dim = 32
patch_size = 8
depth = 1
heads = 2
crop_size = 16

[training]
epochs = 6
batch_size = 16
base_lr = 1e-3
ema_warmup_steps = 50
"""


@pytest.mark.slow
def test_criterion_08_ablation_direction(tmp_path, monkeypatch):
    with criterion(8, "KD vs no-KD relation Top-1 over 3 seeds (informational)") as notes:
        cfg = tmp_path / "ablation.toml"
        cfg.write_text(ABLATION_CONFIG)
        holds = []
        for seed in (0, 1, 2):
            scores = {}
            for variant, flags in (("kd", []), ("nokd", ["--no-kd"])):
                root = tmp_path / f"s{seed}"
                ckpt = root / "checkpoints" / f"{variant}.pt"
                if variant == "kd":
                    run_cli(root, monkeypatch, "generate", "--config", str(cfg), "--seed", str(seed))
                run_cli(root, monkeypatch, "train", "--config", str(cfg), "--seed", str(seed),
                        "--out", str(ckpt), *flags)
                run_cli(root, monkeypatch, "eval", "--config", str(cfg), "--seed", str(seed),
                        "--checkpoint", str(ckpt), "--tasks", "zeroshot")
                rep = MetricsReport.load(root / "reports" / "zeroshot_relations.json")
                scores[variant] = rep.metrics["top1"]
            holds.append(scores["kd"] >= scores["nokd"] - 0.02)
            notes.append(f"seed {seed}: KD {scores['kd']:.3f} vs no-KD {scores['nokd']:.3f}")
        notes.append(f"direction holds on {sum(holds)}/3 seeds; 600 scenes, d=32, 6 epochs; "
                     "non-blocking")


# ------------------------------------------------------------ criterion 9

@pytest.fixture(scope="module")
def e2e_runs(tmp_path_factory):
    from test_cli import TINY
    base = tmp_path_factory.mktemp("e2e")
    cfg = base / "tiny.toml"
    cfg.write_text(TINY)
    roots = []
    with pytest.MonkeyPatch.context() as mp:
        for name in ("first", "second"):
            root = base / name
            run_cli(root, mp, "generate", "--config", str(cfg))
            run_cli(root, mp, "train", "--config", str(cfg))
            run_cli(root, mp, "eval", "--config", str(cfg))
            roots.append(root)
    return roots


def test_criterion_09_metric_identities(e2e_runs):
    with criterion(9, "Dice = 2 IoU/(1+IoU); Top-K and R@K monotone on every report") as notes:
        rng = np.random.default_rng(9)
        for _ in range(100):
            a, b = rng.random((12, 12)) < rng.random(), rng.random((12, 12)) < rng.random()
            inter, union = int(np.sum(a & b)), int(np.sum(a | b))
            if union == 0:
                assert dice_score(a, b) == iou_score(a, b) == 1.0
                continue
            iou = Fraction(inter, union)
            assert iou_score(a, b) == float(iou)
            assert dice_score(a, b) == float(2 * iou / (1 + iou))
        paths = [p for root in e2e_runs for p in (root / "reports").glob("*.json")]
        checked = 0
        for path in paths:
            rep = MetricsReport.load(path)
            for prefix in ("top", "R@"):
                vals = [rep.metrics[f"{prefix}{k}"] for k in (1, 5, 10)
                        if f"{prefix}{k}" in rep.metrics]
                assert vals == sorted(vals), f"{path.name}: {vals}"
                checked += bool(vals)
        assert checked >= 10
        notes.append(f"100 mask pairs exact; {checked} ranked reports of {len(paths)} monotone")


# ----------------------------------------------------------- criterion 10

def test_criterion_10_curation_oracles():
    with criterion(10, "clustering matches the MST-cut oracle; negatives never collide") as notes:
        emb = CharNgramEmbedder()
        X = np.stack([emb(lab) for lab in LABELS_30])
        groups, noise = oracle_partition(X, 2, 2)
        state = cluster_objects(LABELS_30, ClusterConfig(k=2, min_cluster_size=2))
        got = {frozenset(LABELS_30.index(lab) for lab, g in state.group_assignments.items()
                         if g == gid) for gid in state.group_names}
        assert got == groups
        assert {LABELS_30.index(lab) for lab in state.noise_labels} == noise
        cfg = SceneConfig()
        ant = AntonymDictionary()
        n_rel = 0
        for s in range(500):
            rec = generate_scene(cfg, seed=(10, s))
            positives = set(rec.positive_triplets())
            for idx, rel in enumerate(rec.relations):
                for negs in (rel.negatives, generate_negative_triplets(rec, idx, ant, cfg.n_negatives)):
                    assert not positives.intersection(negs)
                n_rel += 1
        notes.append(f"30 labels -> {len(groups)} groups + {len(noise)} noise, identical; "
                     f"500 scenes / {n_rel} relations without collision")


# ----------------------------------------------------------- criterion 11

def test_criterion_11_end_to_end_determinism(e2e_runs):
    with criterion(11, "generate -> train -> eval twice is byte-identical") as notes:
        first, second = (tree_bytes(r) for r in e2e_runs)
        assert first.keys() == second.keys()
        differing = [k for k in first if first[k] != second[k]]
        assert not differing, differing
        kinds = {"manifests": "manifest.json", "checkpoints": ".pt", "reports": "reports/"}
        counts = {label: sum(1 for k in first if pat in k) for label, pat in kinds.items()}
        assert all(counts.values())
        notes.append(f"{len(first)} files identical ("
                     + ", ".join(f"{v} {k}" for k, v in counts.items()) + ")")
