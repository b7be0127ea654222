import pytest

from neuralkem.config import ConfigError, ExperimentConfig, config_from_dict, dump_config, load_config


def test_defaults():
    cfg = load_config(None)
    assert (cfg.grid.nx, cfg.grid.ny) == (64, 64)
    assert cfg.kernel.k == 48 and cfg.kernel.sigma == 1.0
    rc = cfg.recon_config("neural-kem")
    assert rc.method == "neural_kem" and rc.subiters == 150 and rc.outer_iters == 60
    assert rc.network.lr == 1e-3
    admm = cfg.recon_config("dip_admm")
    assert admm.rho == 0.05 and admm.admm_recon_subiters == 4 and admm.subiters == 50


def test_round_trip(tmp_path):
    doc = {"seed": 7, "grid": {"nx": 32, "ny": 32, "pixel_size": 6.0},
           "network": {"base_channels": 8, "scale_rule": 2.5},
           "recon": {"neural_kem": {"subiters": 20, "checkpoints": [5, 10]}},
           "simulation": {"realizations": 3}}
    cfg = config_from_dict(doc)
    path = tmp_path / "c.toml"
    path.write_text(dump_config(cfg))
    back = load_config(path)
    assert back.to_dict() == cfg.to_dict()
    assert back.digest() == cfg.digest()
    assert back.recon_config("neural_kem").checkpoints == (5, 10)
    assert back.network.scale_rule == 2.5


def test_digest_tracks_content():
    a = ExperimentConfig()
    b = config_from_dict({"seed": 1})
    assert a.digest() != b.digest()
    assert a.digest() == config_from_dict({}).digest()


@pytest.mark.parametrize("doc", [
    {"grid": {"nx": 32, "color": 1}},
    {"gird": {}},
    {"grid": {"nx": "big"}},
    {"recon": {"fbp": {}}},
    {"recon": {"kem": {"network": {}}}},
    {"simulation": {"frame_counts": [1.0, 2.0]}},
    {"simulation": {"realizations": 0}},
    {"network": {"scale_rule": "median"}},
    {"kernel": {"composite_source": "magic"}},
    {"schedule": {"preset": "weekly"}},
    {"recon": {"dip_admm": {"rho": 0.0}}},
])
def test_bad_documents(doc):
    with pytest.raises(ConfigError):
        config_from_dict(doc)


def test_bad_toml(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("[grid\nnx = 3")
    with pytest.raises(ConfigError):
        load_config(p)


def test_relative_paths_resolve_against_config_dir(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('init_image = "start.f64"\n')
    cfg = load_config(p)
    assert cfg.resolve(cfg.init_image) == tmp_path / "start.f64"
