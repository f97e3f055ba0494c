import numpy as np
import pytest

from cagan import cli
from cagan import toyset as ts
from cagan.config import ConfigError, RunConfig, parse_overrides, resolve, variant_defaults
from cagan.core import Rng, load_tensors
from cagan.gan import DEFAULT_LOCAL_PLACEMENT
from cagan.pipeline import (
    GanTrainer, NumericError, _schedule, _step_budget, params_digest, pretrain_damsm,
)
from cagan.sensitivity import EditResult, SensitivityReport, substitute

TINY = dict(stage_h0=8, text_dim=8, base_channels=4, nz=5, ndf=4, n_res=1, n_train=8, n_test=4,
            batch=4, damsm_batch=4, damsm_epochs=1, epochs=1, evalnet_epochs=1, eval_samples=20,
            eval_every=1)


def tiny_config(**extra):
    return resolve("desk", extra.pop("variant", "se"), TINY, extra)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    return ts.build_dataset(root, 8, 4, seed=0, resolution=32)


@pytest.fixture(scope="module")
def tiny_damsm(tiny_data):
    cfg = tiny_config()
    damsm, losses = pretrain_damsm(cfg, ts.load_split(tiny_data, "train"), ts.load_vocabulary(tiny_data))
    assert len(losses) == 2 and all(np.isfinite(losses))
    return damsm


def trainer(cfg, data, damsm):
    return GanTrainer(cfg, damsm, ts.load_split(data, "train"), ts.load_vocabulary(data))


# -- configuration --------------------------------------------------------------------------------


def test_desk_defaults():
    cfg = resolve()
    assert (cfg.variant, cfg.r, cfg.lam, cfg.stage_h0, cfg.batch, cfg.lr) == ("se", 1, 0.1, 16, 20, 2e-4)
    assert (cfg.beta1, cfg.beta2, cfg.nz, cfg.kl_weight, cfg.resolution) == (0.5, 0.999, 100, 1.0, 64)
    assert (cfg.n_train, cfg.n_test) == (2000, 400)


def test_variant_and_profile_defaults():
    assert variant_defaults("desk", "l+se") == {"r": 4, "lam": 5.0, "placement": DEFAULT_LOCAL_PLACEMENT}
    assert variant_defaults("paper-coco", "se")["lam"] == 50.0
    assert variant_defaults("paper-coco", "l+se")["lam"] == 50.0
    cub = resolve("paper-cub")
    assert cub.model_variant().stage_resolutions == (64, 128, 256) and cub.epochs == 600
    assert resolve("paper-coco").epochs == 200


def test_precedence_profile_variant_file_flags():
    cfg = resolve("smoke", "l+se", {"lam": 7.0, "batch": 6}, {"batch": 8})
    assert cfg.r == 4 and cfg.lam == 7.0 and cfg.batch == 8 and cfg.max_steps == 200


def test_config_text_round_trip(tmp_path):
    cfg = resolve("desk", "l+se", overrides={"seed": 9})
    cfg.save(tmp_path / "c.txt")
    back = RunConfig.load(tmp_path / "c.txt")
    assert back == cfg and back.digest() == cfg.digest()
    assert "placement = f0_up1,f1_attn,f2_attn" in cfg.to_text()


def test_parse_overrides_accepts_lambda_and_comments():
    assert parse_overrides("lambda = 2.5  # weight\n\nstage-h0 = 32") == {"lam": 2.5, "stage_h0": 32}


@pytest.mark.parametrize("text", ["bogus = 1", "batch = many", "no equals sign"])
def test_parse_overrides_errors(text):
    with pytest.raises(ConfigError):
        parse_overrides(text)


@pytest.mark.parametrize("bad", [dict(lam=-1.0), dict(batch=1), dict(variant="gan"), dict(r=3),
                                 dict(eval_samples=15), dict(profile="huge")])
def test_invalid_configs_are_rejected(bad):
    with pytest.raises(ConfigError):
        profile = bad.pop("profile", "desk")
        resolve(profile, bad.pop("variant", "se"), None, bad)


# -- schedules --------------------------------------------------------------------------------------


def test_step_budget_and_schedule():
    assert _step_budget(10, 3, 2, 0) == 6 and _step_budget(10, 3, 0, 5) == 5 and _step_budget(10, 3, 2, 4) == 4
    with pytest.raises(ValueError):
        _step_budget(2, 3, 1, 0)
    full = list(_schedule(10, 3, 0, "x", 7))
    assert [s for s, _, _ in full] == list(range(7)) and [e for _, e, _ in full] == [0, 0, 0, 1, 1, 1, 2]
    assert all(len(set(idx)) == 3 for _, _, idx in full)
    tail = list(_schedule(10, 3, 0, "x", 7, start=4))
    assert [s for s, _, _ in tail] == [4, 5, 6]
    assert all(np.array_equal(a[2], b[2]) for a, b in zip(full[4:], tail))


# -- training -----------------------------------------------------------------------------------------


def weights(module) -> str:
    # buffers are excluded: spectral-norm u vectors advance on every discriminator forward
    return params_digest({n: p.data for n, p in module.named_parameters()})


def test_phases_touch_only_their_own_parameters(tiny_data, tiny_damsm):
    tr = trainer(tiny_config(), tiny_data, tiny_damsm)
    idx = np.arange(4)
    enc = tr.text.take(idx)
    tr.G.train()
    stages, kl = tr.generate(enc, Rng(0, "gan-step", 0))
    g0 = weights(tr.G)
    d0 = [weights(d) for d in tr.D]
    tr.d_phase(idx, stages, enc)
    d1 = [weights(d) for d in tr.D]
    assert weights(tr.G) == g0 and all(a != b for a, b in zip(d0, d1))
    damsm0 = weights(tr.damsm)
    tr.g_phase(idx, stages, kl, enc)
    assert weights(tr.G) != g0
    assert [weights(d) for d in tr.D] == d1
    assert weights(tr.damsm) == damsm0


def test_train_step_metrics_are_finite(tiny_data, tiny_damsm):
    tr = trainer(tiny_config(variant="l+se", r=2), tiny_data, tiny_damsm)
    m = tr.train_step(np.arange(4))
    assert tr.step == 1
    assert all(np.isfinite([m.d_loss, m.g_loss, m.g_adv, m.damsm, m.kl]))
    assert 0.0 <= m.d_acc_real <= 1.0


def test_resume_matches_uninterrupted_run(tiny_data, tiny_damsm, tmp_path):
    cfg = tiny_config(max_steps=4, epochs=0)
    straight = trainer(cfg, tiny_data, tiny_damsm)
    for step, _, idx in _schedule(8, 4, cfg.seed, "gan-epoch", 4):
        straight.train_step(idx)

    first = trainer(cfg, tiny_data, tiny_damsm)
    for step, _, idx in _schedule(8, 4, cfg.seed, "gan-epoch", 2):
        first.train_step(idx)
    saved = first.state_dict()
    second = trainer(cfg, tiny_data, tiny_damsm)
    second.load_state_dict(saved)
    for step, _, idx in _schedule(8, 4, cfg.seed, "gan-epoch", 4, start=second.step):
        second.train_step(idx)
    assert params_digest(straight.state_dict()) == params_digest(second.state_dict())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_aborts(tiny_data, tiny_damsm):
    tr = trainer(tiny_config(), tiny_data, tiny_damsm)
    tr.D[0].uncond.w.data[:] = np.nan
    with pytest.raises(NumericError):
        tr.train_step(np.arange(4))


def test_sample_is_deterministic_and_eps_free_by_default(tiny_data, tiny_damsm):
    tr = trainer(tiny_config(), tiny_data, tiny_damsm)
    enc = tr.text.take(np.arange(3))
    noise = Rng(0).normal((3, 5))
    a, b = tr.sample(enc, noise), tr.sample(enc, noise)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert [x.shape[-1] for x in a] == [8, 16, 32]


# -- sensitivity helpers --------------------------------------------------------------------------------


def test_substitute():
    vocab = ts.corpus_vocabulary()
    cap = "a large red square on the center of a dark background"
    assert substitute(cap, "red", "blue", vocab) == cap.replace("red", "blue")
    with pytest.raises(ValueError):
        substitute(cap, "red", "purple", vocab)
    with pytest.raises(ValueError):
        substitute(cap, "a", "the", vocab)


def test_sensitivity_report_rates():
    rep = SensitivityReport("c", [EditResult(0, "red", "blue", "red", "blue", "square", "square"),
                                  EditResult(1, "red", "blue", "red", "red", "square", "square"),
                                  EditResult(0, "red", "green", "red", "white", "square", "circle")])
    assert rep.flip_rate() == pytest.approx(2 / 3) and rep.flip_rate("red", "blue") == 0.5
    assert rep.hit_rate() == pytest.approx(1 / 3)
    assert "# overall flip rate: 0.667" in rep.to_text()


# -- command line ---------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    conf = root / "tiny.txt"
    conf.write_text("".join(f"{k} = {v}\n" for k, v in TINY.items()), encoding="utf-8")
    data, run = root / "data", root / "run"
    common = ["--config", str(conf), "--data", str(data), "--out", str(run)]
    for cmd in ("build-data", "pretrain-damsm", "train-evalnet", "train"):
        assert cli.main(["-q", cmd, *common]) == 0
    return root, run


def test_cli_run_directory_contents(cli_run):
    _, run = cli_run
    for name in ("config.txt", "vocab.txt", "damsm.ckpt", "damsm_losses.csv", "evalnet.ckpt", "gan.ckpt",
                 "report.csv", "curves.ppm", "samples.ppm"):
        assert (run / name).exists(), name
    report = (run / "report.csv").read_text().splitlines()
    assert any(line.startswith("# evalnet_sha256: ") for line in report)
    assert [line.split(",")[0] for line in report if line[:1].isdigit()] == ["0", "1"]
    state = load_tensors(run / "gan.ckpt")
    assert not any(k.startswith("g.lattn.") for k in state) and state["meta.step"][0] == 2


def test_cli_generate_is_deterministic(cli_run, tmp_path):
    _, run = cli_run
    caps = tmp_path / "caps.txt"
    caps.write_text("a small red circle on the left of a dark background\nzebra stripes\n", encoding="utf-8")
    for out in ("a", "b"):
        assert cli.main(["-q", "generate", "--ckpt", str(run / "gan.ckpt"), "--captions", str(caps),
                         "--out", str(tmp_path / out)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "0001_stage2.ppm" in files and "grid.ppm" in files
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_cli_generate_empty_caption_file(cli_run, tmp_path, capsys):
    _, run = cli_run
    (tmp_path / "empty.txt").write_text("\n\n", encoding="utf-8")
    code = cli.main(["-q", "generate", "--ckpt", str(run / "gan.ckpt"), "--captions",
                     str(tmp_path / "empty.txt"), "--out", str(tmp_path / "g")])
    assert code == 0 and "nothing generated" in capsys.readouterr().out
    assert not any((tmp_path / "g").glob("*.ppm"))


def test_cli_sensitivity_identity_edit_flips_nothing(cli_run, tmp_path):
    _, run = cli_run
    report = tmp_path / "sens.csv"
    assert cli.main(["-q", "sensitivity", "--ckpt", str(run / "gan.ckpt"), "--sub", "red=red",
                     "--draws", "5", "--report", str(report)]) == 0
    assert "# overall flip rate: 0.000" in report.read_text()


def test_cli_eval_writes_report(cli_run):
    _, run = cli_run
    assert cli.main(["-q", "eval", "--out", str(run), "--n-samples", "20"]) == 0
    assert (run / "eval_report.csv").read_text().count("\n") >= 2


def test_cli_exit_codes(cli_run, tmp_path, monkeypatch):
    root, run = cli_run
    assert cli.main(["-q", "train", "--config", str(tmp_path / "missing.txt")]) == cli.EXIT_CONFIG
    assert cli.main(["-q", "train", "--out", str(run), "--lambda", "-1"]) == cli.EXIT_CONFIG
    assert cli.main(["-q", "sensitivity", "--ckpt", str(run / "gan.ckpt"), "--sub", "red"]) == cli.EXIT_CONFIG
    assert cli.main(["-q", "eval", "--ckpt", str(tmp_path / "nope.ckpt")]) == cli.EXIT_IO
    assert cli.main(["-q", "train", "--out", str(tmp_path / "fresh"), "--data", str(tmp_path / "nodata")]) == cli.EXIT_IO
    (tmp_path / "bad.ckpt").write_bytes(b"garbage")
    (tmp_path / "config.txt").write_text((run / "config.txt").read_text())
    (tmp_path / "caps.txt").write_text("a red circle\n")
    assert cli.main(["-q", "generate", "--ckpt", str(tmp_path / "bad.ckpt"), "--captions",
                     str(tmp_path / "caps.txt"), "--out", str(tmp_path / "g")]) == cli.EXIT_IO

    def explode(*a, **k):
        raise NumericError("loss is nan at step 0")

    monkeypatch.setattr(cli, "pretrain_damsm", explode)
    args = ["-q", "pretrain-damsm", "--config", str(root / "tiny.txt"), "--data", str(root / "data"),
            "--out", str(tmp_path / "r2")]
    assert cli.main(args) == cli.EXIT_NUMERIC
