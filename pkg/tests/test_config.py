import json
from pathlib import Path

import pytest

from diffretrieve.config import (
    BankConfig,
    ConfigError,
    ExperimentConfig,
    OptimConfig,
    OptimSection,
    RetrievalSection,
    config_from_dict,
    load_config,
)
from diffretrieve.diffmath import InvalidArgument
from diffretrieve.losses import UnsupportedTerm

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


class TestDefaults:
    def test_optimizer_defaults(self):
        o = OptimConfig()
        assert (o.learning_rate, o.beta1, o.beta2, o.batch_size) == (0.00025, 0.0, 0.9, 16)
        assert o.epochs == 50

    def test_retrieval_sections(self):
        r = RetrievalSection()
        assert r.training().tau == 0.1 and r.training().noise == "gumbel"
        assert r.evaluation().tau == 0.01 and r.evaluation().noise == "disabled"
        assert r.training().query_init == "given-feature"

    def test_optim_split(self):
        o = OptimSection(learning_rate=0.01, cooc_learning_rate=0.5, cooc_epochs=3, cooc_batch_size=8)
        assert o.retrieval().learning_rate == 0.01
        c = o.cooccurrence()
        assert (c.learning_rate, c.epochs, c.batch_size) == (0.5, 3, 8)


class TestValidation:
    @pytest.mark.parametrize(
        "kwargs", [{"learning_rate": -1.0}, {"beta1": 1.0}, {"beta2": -0.1}, {"epochs": -1}, {"batch_size": 0}]
    )
    def test_optim(self, kwargs):
        with pytest.raises(InvalidArgument):
            OptimConfig(**kwargs)

    def test_bank_needs_held_out_images(self):
        with pytest.raises(InvalidArgument):
            BankConfig(images=10, train_graphs=8, eval_graphs=8)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="learning_rat"):
            config_from_dict({"optim": {"learning_rat": 0.1}})

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="extra"):
            config_from_dict({"extra": {}})

    @pytest.mark.parametrize("section, key, value", [("optim", "epochs", 2.5), ("retrieval", "k", "5"), ("bank", "sigma", True)])
    def test_type_checks(self, section, key, value):
        with pytest.raises(ConfigError):
            config_from_dict({section: {key: value}})

    def test_out_of_scope_loss(self):
        with pytest.raises(UnsupportedTerm):
            config_from_dict({"losses": {"lambda_img_adv": 1.0}})

    def test_bad_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{")
        with pytest.raises(ConfigError):
            load_config(p)


class TestDigest:
    def test_round_trip(self):
        cfg = ExperimentConfig()
        assert config_from_dict(json.loads(cfg.canonical_json())) == cfg

    def test_digest_is_stable(self):
        assert ExperimentConfig().digest() == ExperimentConfig().digest()
        assert len(ExperimentConfig().digest()) == 64

    def test_digest_ignores_key_order_and_ints(self):
        a = config_from_dict({"optim": {"seed": 2, "learning_rate": 1}})
        b = config_from_dict({"optim": {"learning_rate": 1.0, "seed": 2}})
        assert a.digest() == b.digest()

    def test_digest_tracks_values(self):
        assert ExperimentConfig().with_overrides(optim={"seed": 9}).digest() != ExperimentConfig().digest()

    def test_shipped_config(self):
        cfg = load_config(CONFIGS / "synthetic.json")
        assert cfg.bank.clusters == 8 and cfg.bank.d_feat == 16
        assert cfg.bank.objects_per_graph == 3 and cfg.retrieval.k == 5
        assert cfg.optim.seed == 1

    def test_overrides_validate(self):
        with pytest.raises(ConfigError):
            ExperimentConfig().with_overrides(retrieval={"tau": 0.0})
