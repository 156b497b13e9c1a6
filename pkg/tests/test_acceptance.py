"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s``.
"""

import contextlib
import json
import math
import time
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
import torch
from oracles import l_con_oracle, supcon_oracle

from mvcc.ablation import ARMS
from mvcc.cli import main
from mvcc.config import TrainConfig, load_config
from mvcc.data import GeneratorParams, generate_synthetic_dataset
from mvcc.errors import ConfigError
from mvcc.evaluation import METRICS, ConfusionMatrix, compute_metrics, predict
from mvcc.gradcheck import TOLERANCE, check_l_con, check_masked_mse_pipeline
from mvcc.losses import ContrastiveConfig, l_con, l_pull, l_push, masked_mse, supcon_baseline
from mvcc.masking import make_mask_plan
from mvcc.model import EncoderConfig, MVCCModel, TokenLayout
from mvcc.training import finetune, run_repeated


@contextlib.contextmanager
def criterion(capsys, n: int, title: str, budget_s: float | None = None):
    t0 = time.perf_counter()
    notes = {}
    try:
        yield notes
        elapsed = time.perf_counter() - t0
        if budget_s is not None:
            assert elapsed < budget_s, f"took {elapsed:.1f}s, budget {budget_s:.0f}s"
    except BaseException as exc:
        with capsys.disabled():
            print(f"\nACCEPTANCE {n:>2} FAIL  {title}: {exc}")
        raise
    extra = "".join(f"; {k} {v}" for k, v in notes.items())
    with capsys.disabled():
        print(f"\nACCEPTANCE {n:>2} PASS  {title} ({time.perf_counter() - t0:.1f}s{extra})")


def _round(x: Decimal) -> int:
    return int(x.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def test_01_masking_arithmetic(capsys):
    with criterion(capsys, 1, "masked fraction equals the rounded dual-level formula exactly", 10) as notes:
        rng = np.random.default_rng(2024)
        rejected = 0
        for case in range(200):
            T, P = int(rng.integers(2, 33)), int(rng.integers(4, 257))
            alpha, beta = round(float(rng.uniform(0, 0.9)), 4), round(float(rng.uniform(0, 100)), 3)
            nf = _round(Decimal(repr(alpha)) * T)
            npch = _round(Decimal(repr(beta)) * P / 100)
            if nf >= T:
                with pytest.raises(ConfigError):
                    make_mask_plan(T, P, alpha, beta, case)
                rejected += 1
                continue
            plan = make_mask_plan(T, P, alpha, beta, case)
            realized = Fraction(int(plan.mask_grid().sum()), T * P)
            a = Fraction(nf, T)
            assert realized == a + (1 - a) * Fraction(npch, P), (T, P, alpha, beta)
        notes["cases"] = 200
        notes["all-frames-masked rejections"] = rejected


def test_02_loss_oracles(capsys):
    with criterion(capsys, 2, "l_con and supcon match scalar brute force within 1e-10", 30) as notes:
        rng = np.random.default_rng(77)
        worst = 0.0
        n_sup = 0
        for _ in range(100):
            B, D = int(rng.integers(2, 9)), int(rng.integers(1, 17))
            emb = rng.normal(size=(B, D))
            labels = rng.integers(0, 2, size=B)
            tau = float(rng.uniform(0.05, 1.0))
            got = l_con(torch.from_numpy(emb), torch.from_numpy(labels), ContrastiveConfig(tau=tau)).item()
            worst = max(worst, abs(got - l_con_oracle(emb.tolist(), labels.tolist(), tau)))
            if len(set(labels.tolist())) < B:
                got = supcon_baseline(torch.from_numpy(emb), torch.from_numpy(labels), tau).item()
                worst = max(worst, abs(got - supcon_oracle(emb.tolist(), labels.tolist(), tau)))
                n_sup += 1
        assert worst < 1e-10, worst
        notes["max abs diff"] = f"{worst:.1e}"
        notes["supcon batches"] = n_sup


def test_03_gradients(capsys):
    with criterion(capsys, 3, "finite differences match autograd (l_con, masked_mse through decode(encode))", 120) as notes:
        e1 = max(check_l_con(seed=s) for s in range(3))
        e2 = max(check_masked_mse_pipeline(seed=s) for s in range(2))
        assert e1 < TOLERANCE and e2 < TOLERANCE, (e1, e2)
        notes["max rel err"] = f"{max(e1, e2):.1e}"


def test_04_divided_attention_locality(capsys):
    with criterion(capsys, 4, "temporal sub-block only moves tokens sharing the patch index", 10):
        torch.manual_seed(0)
        enc_cfg = EncoderConfig(T=8, H=32, W=32, patch_size=8)
        model = MVCCModel(enc_cfg)
        blk = model.encoder.blocks[0]
        with torch.no_grad():
            blk.mlp.fc2.weight.zero_()
            blk.mlp.fc2.bias.zero_()
        T, P = enc_cfg.T, enc_cfg.P
        for full in (True, False):
            layout = TokenLayout.grid(1, T, P)
            if not full:
                layout = TokenLayout(layout.positions.clone())
            x = torch.randn(1, T * P, enc_cfg.token_dim)
            for f0, j0 in [(0, 0), (3, 7), (7, 15)]:
                y = x.clone()
                y[0, f0 * P + j0] += 1.0
                diff = (blk.temporal(y, layout) - blk.temporal(x, layout))[0].reshape(T, P, -1)
                moved = diff.abs().amax(-1) != 0
                assert moved[:, j0].any()
                assert not torch.cat([moved[:, :j0], moved[:, j0 + 1 :]], dim=1).any()


def test_05_masked_only_reconstruction(capsys):
    with criterion(capsys, 5, "masked inputs never reach the encoder; loss reads masked positions only", 10):
        torch.manual_seed(0)
        cfg = load_config()
        model = MVCCModel(cfg.model.encoder, cfg.model.decoder)
        T, P, p = cfg.model.encoder.T, cfg.model.encoder.P, cfg.model.encoder.patch_size
        gw = cfg.model.encoder.W // p
        plans = [make_mask_plan(T, P, 0.5, 75, s) for s in range(3)]
        mask = torch.from_numpy(np.stack([pl.mask_grid() for pl in plans]))
        px = torch.rand(3, T, cfg.model.encoder.H, cfg.model.encoder.W, 1)
        pred, target, lat = model.pretrain_forward(px, mask)
        px2 = px.clone()
        for b, pl in enumerate(plans):
            for f, j in pl.mask_positions:
                r, c = divmod(j, gw)
                px2[b, f, r * p : (r + 1) * p, c * p : (c + 1) * p] = torch.rand(p, p, 1)
        pred2, target2, lat2 = model.pretrain_forward(px2, mask)
        flat = mask.reshape(3, -1)
        assert torch.equal(lat, lat2)
        assert torch.equal(target[~flat], target2[~flat])
        assert torch.equal(pred, pred2)

        loss = masked_mse(pred, target, flat)
        pred3 = pred.detach().clone()
        pred3[~flat] = torch.randn_like(pred3[~flat]) * 100
        assert masked_mse(pred3, target, flat).item() == loss.item()


def test_06_trivial_values(capsys):
    with criterion(capsys, 6, "trivial loss and metric examples hold exactly"):
        t = lambda *v: torch.tensor(v, dtype=torch.float64)  # noqa: E731
        assert l_pull(t(0.3, 0.4), t(0.3, 0.4)).item() == 0.0
        assert l_pull(t(1, 1), t(0, 0)).item() == 2.0
        assert l_push(t(0.3, 0.4), t(0.3, 0.4)).item() == 1.0
        assert l_push(t(1, 0), t(0, 1)).item() == 0.0
        assert l_push(t(0.5, 0), t(0.25, 0)).item() == 0.75

        same = t(0.6, 0.8).expand(2, 2).clone()
        assert l_con(same, torch.tensor([1, 1])).item() == 0.0
        assert l_con(same, torch.tensor([0, 1])).item() == 1.0
        assert supcon_baseline(same, torch.tensor([0, 0]), 0.1).item() == 0.0
        circle = torch.stack([t(1, 0), t(-1, 0), t(0, 1), t(0, -1)])
        assert abs(supcon_baseline(circle, torch.tensor([0, 0, 1, 1]), 1.0).item() - math.log(1 + 2 * math.e)) < 1e-12
        simplex = torch.tensor([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=torch.float64)
        lab = torch.tensor([0, 0, 1, 1])
        assert abs(supcon_baseline(simplex, lab, 0.2).item() - supcon_baseline(simplex, lab, 0.4).item()) < 1e-12

        m = compute_metrics(ConfusionMatrix(tp=76, fn=24, tn=96, fp=4))
        assert [round(m[k], 2) for k in METRICS] == [86.0, 76.0, 96.0, 95.0, 84.44]
        assert all(v == 100.0 for v in compute_metrics(ConfusionMatrix(tp=10, tn=30)).values())
        m = compute_metrics(ConfusionMatrix(tn=7, fp=1))
        assert m["SEN"] is None and m["ACC"] == 87.5
        m = compute_metrics(ConfusionMatrix.from_predictions([0, 0, 0, 1] * 10, [0] * 40))
        assert (m["ACC"], m["SEN"], m["SPE"]) == (75.0, 0.0, 100.0)


def test_07_overfit_sanity(capsys, tmp_path):
    with criterion(capsys, 7, "arm=none fits 8 clips to 100% train accuracy within 300 steps", 300) as notes:
        cfg = load_config()
        params = GeneratorParams(**{**cfg.data.params.__dict__, "split": (1.0, 0.0, 0.0)})
        man = generate_synthetic_dataset(8, params, 0, tmp_path)
        ft = TrainConfig(epochs=300, batch_size=8, contrastive_arm="none", lambda_=0.0, augment=False, seed=0)
        assert ft.learning_rate == 0.0075
        rec, model = finetune(man, ft, cfg.model.encoder)
        assert len(rec.step_losses) <= 300
        px = man.load_pixels(man.entries)
        labels = np.array([e.label for e in man.entries])
        preds, _ = predict(model, px)
        acc = 100.0 * (preds == labels).mean()
        assert acc == 100.0, acc
        notes["steps"] = len(rec.step_losses)
        notes["final loss"] = f"{rec.step_losses[-1]:.4f}"


@pytest.mark.slow
def test_08_end_to_end_benchmark(capsys, tmp_path):
    with criterion(capsys, 8, "easy benchmark, full MVCC arm, 4 seeds: ACC >= 90 and MSE < 0.5x initial", 1800) as notes:
        cfg = load_config()
        man = generate_synthetic_dataset(cfg.data.n_clips, cfg.data.params, cfg.data.seed, tmp_path / "data")
        assert [len(man.split(s)) for s in ("train", "val", "test")] == [200, 40, 60]
        assert cfg.pretrain.masking_arm == "dual" and cfg.pretrain.mask_ratios() == (0.5, 75.0)
        assert cfg.finetune.contrastive_arm == "cscl" and cfg.finetune.lambda_ == 0.1
        report, records = run_repeated(cfg, [1, 2, 3, 4], man)
        ratios = [r.final_loss / r.initial_loss for r in records if r.stage == "pretrain"]
        assert len(ratios) == 4 and max(ratios) < 0.5, ratios
        acc = report.aggregate["ACC"]["mean"]
        notes["ACC SEN SPE PRE F1"] = report.row()
        notes["worst MSE ratio"] = f"{max(ratios):.3f}"
        assert acc >= 90.0, report.row()


TINY = {
    "data": {"n_clips": 24, "seed": 5, "params": {"T": 4, "H": 16, "W": 16}},
    "model": {
        "encoder": {"T": 4, "H": 16, "W": 16, "token_dim": 16, "depth": 1, "heads": 2},
        "decoder": {"token_dim": 16, "depth": 1, "heads": 2},
    },
    "pretrain": {"epochs": 2},
    "finetune": {"epochs": 2},
}


def _tiny_config(tmp_path) -> Path:
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


def test_09_ablation_harness(capsys, tmp_path):
    with criterion(capsys, 9, "ablate emits 6 arms x 5 metrics as mean(std) over 4 seeds with verifiable reductions"):
        cfg = _tiny_config(tmp_path)
        code = main(["ablate", "--config", str(cfg), "--out", str(tmp_path / "abl"), "--seeds", "1,2,3,4"])
        capsys.readouterr()
        assert code == 0
        d = json.loads((tmp_path / "abl" / "ablation.json").read_text())
        assert list(d) == sorted(ARMS) and set(d) == set(ARMS)
        lines = (tmp_path / "abl" / "ablation.txt").read_text().splitlines()
        assert [l.split()[0] for l in lines[1:]] == list(ARMS)
        for l in lines[1:]:
            cells = l.split()[1:]
            assert len(cells) == 5
            for c in cells:
                assert c == "n/a" or (c.endswith(")") and "(" in c and len(c.split("(")[0].split(".")[1]) == 2)
        for arm in ARMS:
            assert len(d[arm]["report"]["per_seed"]) == 4
        assert d["baseline"]["config"]["finetune"]["lambda"] == 0.0 and d["baseline"]["config"]["pretrain"] is None
        assert d["+scl"]["config"]["finetune"]["contrastive_arm"] == "scl"
        assert d["+cscl"]["config"]["finetune"]["contrastive_arm"] == "cscl"
        # recorded mask plans: T=4, P=4 grid, alpha=0.5, beta=75
        assert d["mvcc"]["mask_stats"] == [[2, 3]]
        assert d["mvcc-patch"]["mask_stats"] == [[0, 3]]
        assert d["mvcc-frame"]["mask_stats"] == [[2, 0]]
        for arm in ("mvcc-patch", "mvcc-frame", "mvcc"):
            assert d[arm]["config"]["finetune"]["contrastive_arm"] == "cscl"


def _strip_times(obj):
    if isinstance(obj, dict):
        return {k: _strip_times(v) for k, v in obj.items() if k != "wall_time"}
    if isinstance(obj, list):
        return [_strip_times(v) for v in obj]
    return obj


def _snapshot(root: Path) -> dict:
    snap = {}
    for f in sorted(root.rglob("*")):
        if not f.is_file():
            continue
        if f.suffix == ".json":
            snap[str(f.relative_to(root))] = _strip_times(json.loads(f.read_text()))
        else:
            snap[str(f.relative_to(root))] = f.read_bytes()
    return snap


def test_10_determinism(capsys, tmp_path):
    with criterion(capsys, 10, "re-running commands reproduces trajectories, reports and artifacts bit-identically") as notes:
        cfg = str(_tiny_config(tmp_path))
        out = tmp_path / "run"
        man = str(out / "data" / "manifest.json")
        commands = [
            ["gen-data", "--config", cfg, "--out", str(out / "data")],
            ["pretrain", "--config", cfg, "--out", str(out / "pre"), "--set", f"manifest={man}"],
            ["finetune", "--config", cfg, "--out", str(out / "ft"), "--set", f"manifest={man}",
             "--set", f"finetune.init_checkpoint={out / 'pre' / 'encoder.ckpt'}"],
            ["eval", "--config", cfg, "--out", str(out / "ev"), "--set", f"manifest={man}",
             "--set", f"eval.checkpoint={out / 'ft' / 'model.ckpt'}"],
            ["ablate", "--config", cfg, "--out", str(out / "abl"), "--seeds", "1,2", "--set", f"manifest={man}"],
        ]
        snaps, stdouts = [], []
        for _ in range(2):
            texts = []
            for argv in commands:
                assert main(argv) == 0, argv
                texts.append(capsys.readouterr().out)
            snaps.append(_snapshot(out))
            stdouts.append(texts)
        assert snaps[0].keys() == snaps[1].keys()
        for k in snaps[0]:
            assert snaps[0][k] == snaps[1][k], k
        assert stdouts[0] == stdouts[1]
        notes["files compared"] = len(snaps[0])
