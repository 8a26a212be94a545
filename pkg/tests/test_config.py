import pytest

from stvsr.config import ConfigError, PipelineConfig, load_config, seed_stream, with_seed


def test_defaults():
    cfg = PipelineConfig()
    assert (cfg.scales.phi_s, cfg.scales.phi_t) == (4, 4)
    assert cfg.train.lr == 5e-5 and (cfg.train.beta1, cfg.train.beta2) == (0.9, 0.999)
    assert cfg.train.weight_decay == 0.01
    assert cfg.loss.gamma_consis == 0.1
    assert cfg.model.t == 799 and cfg.model.t_max == 1000 and cfg.model.n_keyframes == 5


def test_sections_and_overrides():
    text = """
[scales]
phi_s = 2
phi_t = 3
[degrade]
blur_sigma = 0.5, 1.5
noise_sigma = 0
quantize_bits = 8
[train]
lr = 1e-3
iters = 7
seed = 11
[loss]
gamma_consis = 0.2
[model]
use_vrg = false
aggregation = flow2
"""
    cfg = load_config(text=text)
    assert cfg.seed == 11 and cfg.train.seed == 11
    assert cfg.scales.phi_s == 2 and cfg.degrade.scales.phi_t == 3
    assert cfg.degrade.blur_sigma_range == (0.5, 1.5) and cfg.degrade.noise_sigma_range == (0.0, 0.0)
    assert cfg.degrade.quantize_bits == 8
    assert cfg.train.lr == 1e-3 and cfg.train.iters == 7
    assert cfg.loss.gamma_consis == 0.2
    assert cfg.model.use_vrg is False and cfg.model.aggregation == "flow2"
    assert load_config(text=text, seed=3).seed == 3


@pytest.mark.parametrize("text", [
    "[train]\nlearning_rate = 1\n",
    "[train]\nlr = -1\n",
    "[train]\nbatch = two\n",
    "[model]\nuse_vrg = maybe\n",
    "[model]\nt = 1001\n",
    "[scales]\nphi_s = 0\n",
    "[degrade]\nblur_sigma = 1 2 3\n",
    "no section header\n",
])
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        load_config(text=text)


def test_seed_streams_are_labelled():
    assert seed_stream(0, "a") == seed_stream(0, "a")
    assert seed_stream(0, "a") != seed_stream(0, "b")
    assert seed_stream(0, "a", 1) != seed_stream(0, "a", 2)
    assert seed_stream(0, "a") != seed_stream(1, "a")


def test_with_seed_rederives_streams():
    a = with_seed(PipelineConfig(), 5)
    assert a.seed == 5 and a.train.seed == 5
    assert a.degrade.seed == seed_stream(5, "degrade")
    assert load_config(text="[x]\nseed = 5\n").degrade.seed == a.degrade.seed


def test_schedule_keys_parse():
    cfg = load_config(text="[train]\nschedule = cosine\nwarmup = 7\nclip = 0.5\n")
    assert (cfg.train.schedule, cfg.train.warmup, cfg.train.clip) == ("cosine", 7, 0.5)
