"""Acceptance criteria, one test per criterion, each printing a PASS line.

Full-scale benchmark numbers are out of reach on a desk; these are the
property-based and directional desk-scale checks standing in for them. Run
with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines.
"""

import json
import time

import numpy as np
import pytest

from nepa import backbone as bb
from nepa import data as D
from nepa import transfer as tr
from nepa.config import RunConfig
from nepa.data import NoiseDataset
from nepa.objective import normalized_target_std
from nepa.optim import EMAState, ScheduleConfig, llrd_factor, lr_at
from nepa.pretrain import init_pretrain_state, pretrain_steps
from nepa.tensor import GradTape, Tensor


def report(name: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}"
    if detail:
        line += f"  ({detail})"
    print(line)
    assert ok, line


def stress_config(stop_grad=True, shift=True, *, steps, base_lr, batch,
                  warmup, seed=1):
    return RunConfig.from_dict({
        "seed": seed,
        "model": {"dim": 32, "depth": 4, "heads": 4},
        "objective": {"stop_grad": stop_grad, "shift": shift},
        "optim": {"base_lr": base_lr, "batch_size": batch, "warmup_steps": warmup,
                  "total_steps": steps},
    })


def run_stress(rc: RunConfig, steps: int, dataset):
    state = init_pretrain_state(rc)
    rows = pretrain_steps(state, dataset, steps, rc.seed)
    images = np.stack([dataset.sample(i).pixels for i in range(32)])
    z = bb.embed(bb.patchify(bb.pixel_norm(Tensor(images)), state.bcfg.patch_size),
                 state.bparams)
    return [r[1] for r in rows], normalized_target_std(z.data)


class TestCriterion1Gradients:
    def test_c01_gradient_integrity(self):
        from nepa.gradcheck import TOLERANCE, run_all
        t0 = time.time()
        results = run_all(n_seeds=10)
        elapsed = time.time() - t0
        worst = max(err for _, err in results)
        failures = [name for name, err in results if not err < TOLERANCE]
        report("C1 gradient integrity",
               not failures and elapsed < 120.0,
               f"{len(results)} checks, worst {worst:.2e}, {elapsed:.0f}s")


class TestCriterion2Collapse:
    def test_c02_stop_gradient_separates_collapse(self):
        t0 = time.time()
        noise = NoiseDataset(32, 512, seed=7)
        no_sg, std_no_sg = run_stress(
            stress_config(stop_grad=False, steps=500, base_lr=8e-3, batch=16,
                          warmup=20), 500, noise)
        with_sg, std_sg = run_stress(
            stress_config(stop_grad=True, steps=500, base_lr=8e-3, batch=16,
                          warmup=20), 500, noise)
        elapsed = time.time() - t0
        collapsed = min(no_sg) < -0.999 and std_no_sg < 1e-3
        healthy = min(with_sg) > -0.9 and std_sg > 0.1
        report("C2 collapse reproduction", collapsed and healthy and elapsed < 600,
               f"no-sg loss {min(no_sg):.4f} std {std_no_sg:.1e}; "
               f"sg loss {min(with_sg):.4f} std {std_sg:.2f}; {elapsed:.0f}s")


class TestCriterion3Shortcut:
    def test_c03_shift_blocks_identity_shortcut(self):
        t0 = time.time()
        noise = NoiseDataset(32, 512, seed=7)
        no_shift, _ = run_stress(
            stress_config(shift=False, steps=200, base_lr=0.128, batch=32,
                          warmup=10), 200, noise)
        shifted, _ = run_stress(
            stress_config(shift=True, steps=200, base_lr=0.128, batch=32,
                          warmup=10), 200, noise)
        elapsed = time.time() - t0
        report("C3 shift-shortcut reproduction",
               min(no_shift) < -0.999 and min(shifted) > -0.9 and elapsed < 300,
               f"no-shift {min(no_shift):.4f}, shifted {min(shifted):.4f}; "
               f"{elapsed:.0f}s")


class TestCriterion4Causality:
    def test_c04_exact_zero_sensitivity(self):
        t0 = time.time()
        rng = np.random.default_rng(0)
        for trial in range(20):
            depth = int(rng.integers(1, 3))
            heads = int(rng.integers(1, 3))
            dim = int(rng.integers(1, 3)) * 4 * heads
            cfg = bb.BackboneConfig(
                image_size=8, patch_size=4, channels=3, dim=dim, depth=depth,
                heads=heads, mlp_ratio=2.0,
                rope_mode="2d-axial" if trial % 2 else "1d",
                mlp_kind="swiglu" if trial % 3 else "gelu",
                use_qknorm=bool(trial % 2), use_layerscale=bool((trial // 2) % 2))
            cfg.validate()
            params = bb.BackboneParams.init(cfg, seed=trial).astype(np.float64)
            images = Tensor(rng.uniform(size=(1, 3, 8, 8)), dtype=np.float64,
                            requires_grad=True)
            t_cut = int(rng.integers(0, cfg.seq_len - 1))

            # perturbation: outputs at <= t_cut are bit-identical
            base = bb.forward(images, params, cfg).h_out.data
            bumped = images.data.copy()
            row, col = divmod(t_cut + 1, cfg.grid)
            p = cfg.patch_size
            bumped[0, :, row * p:(row + 1) * p, col * p:(col + 1) * p] += 0.5
            pert = bb.forward(Tensor(bumped, dtype=np.float64), params, cfg).h_out.data
            assert np.array_equal(base[0, :t_cut + 1], pert[0, :t_cut + 1]), trial

            # gradient: patches beyond t_cut receive exactly zero
            from nepa import tensor as T
            with GradTape() as tape:
                seq = bb.forward(images, params, cfg)
                loss = T.tsum(T.narrow(seq.h_out, 1, 0, t_cut + 1))
            tape.backward(loss)
            gp = bb.patchify(Tensor(images.grad), cfg.patch_size).data[0, t_cut + 1:]
            assert np.array_equal(gp, np.zeros_like(gp)), trial
        elapsed = time.time() - t0
        report("C4 causality", elapsed < 60.0, f"20 configs, {elapsed:.0f}s")


class TestCriterion5Rope:
    def test_c05_relative_position_invariance(self):
        worst = 0.0
        rng = np.random.default_rng(1)
        for mode in ("1d", "2d-axial"):
            for seed in range(5):
                q = Tensor(rng.normal(size=(1, 2, 9, 8)), dtype=np.float64)
                k = Tensor(rng.normal(size=(1, 2, 9, 8)), dtype=np.float64)
                if mode == "1d":
                    pos = np.arange(9)
                    shift = int(rng.integers(1, 40))
                else:
                    pos = np.stack([np.arange(9) // 3, np.arange(9) % 3], axis=1)
                    shift = rng.integers(1, 40, size=2)
                qr, kr = bb.apply_rope(q, k, pos, mode)
                base = qr.data @ np.swapaxes(kr.data, -1, -2)
                qs, ks = bb.apply_rope(q, k, pos + shift, mode)
                moved = qs.data @ np.swapaxes(ks.data, -1, -2)
                worst = max(worst, float(np.abs(moved - base).max()))
        report("C5 rope shift equivariance", worst <= 1e-5, f"worst {worst:.2e}")


class TestCriterion6QKNorm:
    def test_c06_post_norm_statistics(self):
        from nepa import tensor as T
        worst_mean = 0.0
        worst_var = 0.0
        for seed in range(5):
            x = Tensor(30.0 * np.random.default_rng(seed).normal(size=(2, 6, 16)),
                       dtype=np.float64)
            cfg = bb.BackboneConfig(image_size=12, patch_size=4, dim=16, heads=2,
                                    depth=1, mlp_ratio=2.0)
            cfg.validate()
            params = bb.BackboneParams.init(cfg, seed=seed).astype(np.float64)
            for proj, bias in (("wq", "bq"), ("wk", "bk")):
                v = T.add(T.matmul(x, params[f"blocks.0.attn.{proj}"]),
                          params[f"blocks.0.attn.{bias}"])
                v = T.transpose(T.reshape(v, (2, 6, 2, 8)), (0, 2, 1, 3))
                vn = T.layernorm(v).data
                worst_mean = max(worst_mean, float(np.abs(vn.mean(axis=-1)).max()))
                worst_var = max(worst_var, float(np.abs(vn.var(axis=-1) - 1.0).max()))
        report("C6 qk-norm statistics", worst_mean < 1e-6 and worst_var < 1e-5,
               f"|mean| {worst_mean:.1e}, |var-1| {worst_var:.1e}")


@pytest.fixture(scope="module")
def desk_transfer_artifacts():
    """One pretrained checkpoint shared by the criterion-7 clauses."""
    rc = RunConfig.from_dict({
        "seed": 0,
        "model": {"dim": 64, "depth": 6, "heads": 4},
        "optim": {"base_lr": 6e-3, "batch_size": 64, "warmup_steps": 150,
                  "total_steps": 3000, "ema_decay": 0.999},
        "data": {"train_size": 8192, "test_size": 1024},
    })
    t0 = time.time()
    state = init_pretrain_state(rc)
    train, test = rc.datasets()
    rows = pretrain_steps(state, train, 3000, rc.seed)
    ema = {n: t for n, t in state.ema.as_tensors().items()
           if not n.startswith("objective.")}
    pre = bb.BackboneParams(state.bcfg, ema)
    return dict(rc=rc, bcfg=state.bcfg, train=train, test=test, pre=pre,
                final_loss=rows[-1][1], pretrain_seconds=time.time() - t0)


class TestCriterion7DeskTransfer:
    def test_c07_finetune_and_probe(self, desk_transfer_artifacts):
        art = desk_transfer_artifacts
        t0 = time.time()
        ft = tr.FinetuneConfig(epochs=5, base_lr=1.2e-2, batch_size=64,
                               warmup_epochs=0.25, llrd_start=0.65, llrd_end=1.0)
        aug = D.AugmentConfig(use_mixup=False, use_cutmix=False, label_smoothing=0.1)
        _, _, trace = tr.finetune(art["pre"], art["bcfg"], art["train"], art["test"],
                                  ft, aug, seed=0)
        acc = [v for _, s, m, v in trace if s == "eval"][-1]

        rand = bb.BackboneParams.init(art["bcfg"], seed=999)
        probe_pre = tr.linear_probe(art["pre"], art["bcfg"], art["train"], art["test"],
                                    pooling="avg", steps=1000, lr=0.1)
        probe_rand = tr.linear_probe(rand, art["bcfg"], art["train"], art["test"],
                                     pooling="avg", steps=1000, lr=0.1)
        margin = 100 * (probe_pre - probe_rand)
        total = art["pretrain_seconds"] + (time.time() - t0)
        report("C7 desk-scale transfer",
               acc >= 0.90 and margin >= 5.0 and total < 1800,
               f"finetune {100 * acc:.1f}% (>=90), probe {100 * probe_pre:.1f}% vs "
               f"random {100 * probe_rand:.1f}% (+{margin:.1f}pts >= 5), "
               f"pretrain loss {art['final_loss']:.3f}, {total:.0f}s")

    def test_c07b_similarity_maps_track_shape_interior(self, desk_transfer_artifacts):
        # for queries on the shape, predicted embeddings should look more like
        # other shape patches than background patches
        from nepa.analysis import similarity_map
        art = desk_transfer_artifacts
        bcfg = art["bcfg"]
        spec = art["train"].spec
        g, p = bcfg.grid, bcfg.patch_size
        diffs = []
        for i in range(50):
            sample = art["test"].sample(i)
            images = Tensor(sample.pixels[None])
            # patch-level occupancy from the clean geometry
            s = D.synth_generate(spec, art["test"].offset + i)
            lum = s.pixels.mean(axis=0)
            occupancy = np.array([
                lum[r * p:(r + 1) * p, c * p:(c + 1) * p].mean()
                for r in range(g) for c in range(g)]).reshape(g, g)
            interior = occupancy > occupancy.mean() + 0.1
            background = occupancy < occupancy.mean() - 0.1
            if interior.sum() < 1 or background.sum() < 2:
                continue
            q = int(np.argmax(interior.reshape(-1)))
            smap = similarity_map(images, art["pre"], bcfg, q)
            diffs.append(smap.grid[interior].mean() - smap.grid[background].mean())
        report("C7b similarity maps favor shape interiors",
               len(diffs) >= 25 and float(np.mean(diffs)) > 0,
               f"mean interior-background gap {np.mean(diffs):.4f} over {len(diffs)} images")


class TestCriterion8Schedules:
    def test_c08_lr_ema_llrd_closed_forms(self):
        sched = ScheduleConfig(base_lr=3e-4, batch_size=4096, warmup_steps=40,
                               total_steps=100)
        peak_ok = sched.peak_lr == pytest.approx(4.8e-3, abs=0, rel=0) \
            and lr_at(40, sched) == sched.peak_lr

        params = {"w": Tensor(np.array([2.0]), dtype=np.float64, requires_grad=True)}
        ema = EMAState(params, decay=0.995)
        ema.shadow["w"][...] = 7.0
        for _ in range(1000):
            ema.update(params)
        expected = 7.0 * 0.995 ** 1000 + 2.0 * (1 - 0.995 ** 1000)
        ema_ok = abs(float(ema.shadow["w"][0]) - expected) / expected < 1e-6

        fixed = ScheduleConfig(llrd_start=0.65, llrd_end=0.65)
        moving = ScheduleConfig(llrd_start=0.35, llrd_end=1.0)
        llrd_ok = True
        for layer in range(13):
            llrd_ok &= llrd_factor(layer, 12, 0.77, fixed) == pytest.approx(
                0.65 ** (12 - layer), rel=1e-12)
            d = 0.35 + 0.4 * (1.0 - 0.35)
            llrd_ok &= llrd_factor(layer, 12, 0.4, moving) == pytest.approx(
                d ** (12 - layer), rel=1e-12)
        report("C8 schedules and ema", bool(peak_ok and ema_ok and llrd_ok),
               f"peak {sched.peak_lr:.4e} == 4.8e-3")


class TestCriterion9Reproducibility:
    def test_c09_identical_runs_and_resume(self, tmp_path):
        from nepa.cli import main

        def write(cfg, name):
            p = tmp_path / name
            p.write_text(json.dumps(cfg))
            return p

        base = {
            "seed": 11,
            "model": {"image_size": 8, "patch_size": 4, "dim": 16, "depth": 2,
                      "heads": 2, "mlp_ratio": 2.0},
            "optim": {"base_lr": 8e-3, "batch_size": 16, "warmup_steps": 5,
                      "total_steps": 24},
            "data": {"train_size": 64, "test_size": 16},
            "pretrain": {"steps": 24},
        }
        base["out_dir"] = str(tmp_path / "r1")
        assert main(["pretrain", "--config", str(write(base, "c1.json"))]) == 0
        base["out_dir"] = str(tmp_path / "r2")
        assert main(["pretrain", "--config", str(write(base, "c2.json"))]) == 0
        identical = ((tmp_path / "r1" / "loss.csv").read_bytes()
                     == (tmp_path / "r2" / "loss.csv").read_bytes())

        base["out_dir"] = str(tmp_path / "half")
        base["pretrain"]["steps"] = 10
        assert main(["pretrain", "--config", str(write(base, "c3.json"))]) == 0
        base["out_dir"] = str(tmp_path / "resumed")
        base["pretrain"]["steps"] = 24
        assert main(["pretrain", "--config", str(write(base, "c4.json")),
                     "--resume", str(tmp_path / "half" / "ckpt_final.nepa")]) == 0
        full_rows = (tmp_path / "r1" / "loss.csv").read_text().strip().split("\n")[1:]
        res_rows = (tmp_path / "resumed" / "loss.csv").read_text().strip().split("\n")[1:]
        resume_ok = res_rows == full_rows[10:]
        report("C9 reproducibility", identical and resume_ok,
               f"byte-identical={identical}, resume matches rows 11..24={resume_ok}")


class TestCriterion10AblationHarness:
    def test_c10_table_c_rows(self, tmp_path):
        from nepa.cli import main
        cfg = {
            "seed": 5,
            "out_dir": str(tmp_path / "ablate"),
            "model": {"image_size": 16, "patch_size": 4, "dim": 32, "depth": 2,
                      "heads": 4, "mlp_ratio": 2.0},
            "optim": {"base_lr": 1.6e-2, "batch_size": 32, "warmup_steps": 20,
                      "total_steps": 150, "ema_decay": 0.99},
            "data": {"train_size": 2048, "test_size": 256},
            "finetune": {"epochs": 2, "batch_size": 32, "base_lr": 1.2e-2,
                         "llrd_start": 0.65},
            "augment": {"use_mixup": False, "use_cutmix": False},
            "ablate": {"steps": 150, "finetune_epochs": 2,
                       "mask_ratios": [0.0, 0.4, 0.6]},
        }
        p = tmp_path / "ablate.json"
        p.write_text(json.dumps(cfg))
        t0 = time.time()
        assert main(["ablate", "--config", str(p), "--table", "c"]) == 0
        lines = (tmp_path / "ablate" / "ablate_c.csv").read_text().strip().split("\n")
        header = lines[0].split(",")
        rows = [l.split(",") for l in lines[1:]]
        ratios = [float(r[0]) for r in rows]
        accs = [float(r[1]) for r in rows]
        refs = [r[-1] for r in rows]
        ok = (header[0] == "mask_ratio" and ratios == [0.0, 0.4, 0.6]
              and all(0.0 <= a <= 100.0 for a in accs)
              and refs == ["78.2", "76.4", "75.7"])
        report("C10 ablation harness table c", ok,
               f"desk accs {accs} (recorded, not asserted); reference "
               f"ordering carried in CSV; {time.time() - t0:.0f}s")

    def test_c10b_table_a_failure_statuses(self, tmp_path):
        from nepa.cli import main
        cfg = {
            "seed": 5,
            "out_dir": str(tmp_path / "ta"),
            "model": {"image_size": 32, "patch_size": 8, "dim": 32, "depth": 4,
                      "heads": 4},
            "optim": {"base_lr": 0.128, "batch_size": 32, "warmup_steps": 10,
                      "total_steps": 1500, "ema_decay": 0.99},
            "data": {"train_size": 2048, "test_size": 256},
            "finetune": {"epochs": 2, "batch_size": 32, "base_lr": 1.2e-2,
                         "llrd_start": 0.65},
            "augment": {"use_mixup": False, "use_cutmix": False},
            "ablate": {"steps": 300, "collapse_steps": 1000, "shortcut_steps": 200,
                       "finetune_epochs": 2},
        }
        p = tmp_path / "ta.json"
        p.write_text(json.dumps(cfg))
        t0 = time.time()
        assert main(["ablate", "--config", str(p), "--table", "a"]) == 0
        lines = (tmp_path / "ta" / "ablate_a.csv").read_text().strip().split("\n")
        rows = {tuple(l.split(",")[:3]): l.split(",")[3] for l in lines[1:]}
        no_shift = rows[("False", "True", "True")]
        no_stop = rows[("True", "True", "False")]
        no_causal = rows[("True", "False", "True")]
        full = rows[("True", "True", "True")]
        ok = (no_shift == "shortcut" and no_stop == "collapse"
              and 0 <= float(no_causal) <= 100 and 0 <= float(full) <= 100)
        report("C10b ablation table a failure rows", ok,
               f"no-shift={no_shift}, no-stopgrad={no_stop}, "
               f"bidirectional acc={no_causal}, full acc={full}; "
               f"{time.time() - t0:.0f}s")
