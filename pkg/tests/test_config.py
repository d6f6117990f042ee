from pathlib import Path

import pytest
import yaml

from concept_ablation.config import ABLATION_DEFAULTS, ConfigError, config_from_dict, parse_config

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = Path(__file__).resolve().parent / "fixtures"
RECIPES = sorted(p for p in (ROOT / "experiments").glob("*.yaml") if not p.name.endswith("_vocab.yaml"))

MINIMAL = {"format": "ablation-experiment/1", "seed": 1, "output_dir": "out", "ablation": {"target": "grumpy_cat", "anchor": "cat"}}


def errors_of(doc):
    with pytest.raises(ConfigError) as info:
        config_from_dict(doc)
    return info.value.errors


def test_minimal_config_fills_defaults():
    cfg = config_from_dict(dict(MINIMAL))
    assert cfg.seed == 1
    assert cfg.ablation["steps"] == ABLATION_DEFAULTS["steps"]
    assert cfg.schedule == {"T": 100, "beta_min": 1e-3, "beta_max": 0.2}
    resolved = cfg.to_dict()
    assert resolved["eval"]["n"] == 500
    assert config_from_dict(resolved | {"output_dir": "x"}).config_hash() == cfg.config_hash()


def test_candidates_default_to_labelled_sets():
    cfg = config_from_dict(MINIMAL | {"eval": {"surrounding": ["lion"], "far": ["dog"]}})
    assert [cfg.vocab.describe(p) for p in cfg.candidates()] == ["grumpy_cat", "cat", "lion", "dog"]


@pytest.mark.parametrize("recipe", RECIPES, ids=lambda p: p.stem)
def test_every_shipped_recipe_parses(recipe):
    cfg = parse_config(recipe)
    assert cfg.output_dir.resolve() == (ROOT / "runs" / recipe.stem).resolve()
    cfg.ablation_config().validate(cfg.vocab)


@pytest.mark.parametrize(
    "fixture,fragment",
    [
        ("unknown_token", "ablation.target: unknown token 'grumpy'"),
        ("missing_seed", "seed: required"),
        ("bad_counts", "ablation.steps"),
        ("bad_counts", "ablation.batch_size: must be positive"),
        ("bad_counts", "eval.n"),
        ("unknown_field", "ablation.learning_rate: unknown field"),
        ("literal_synonym", "eval.synonyms[0]"),
    ],
)
def test_malformed_fixtures_are_rejected(fixture, fragment):
    with pytest.raises(ConfigError) as info:
        parse_config(FIXTURES / f"{fixture}.yaml")
    assert any(fragment in e for e in info.value.errors), info.value.errors


def test_all_errors_reported_at_once():
    errs = errors_of({"format": "ablation-experiment/1", "ablation": {"target": "grumpy", "anchor": "kat", "steps": 0.5}})
    joined = "\n".join(errs)
    for part in ("seed", "output_dir", "ablation.target", "ablation.anchor", "ablation.steps"):
        assert part in joined


def test_missing_file_and_bad_yaml(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "absent.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: [unclosed\n")
    with pytest.raises(ConfigError, match="YAML"):
        parse_config(bad)


@pytest.mark.parametrize(
    "patch,fragment",
    [
        ({"format": "ablation-experiment/2"}, "format"),
        ({"seed": -1}, "seed"),
        ({"seed": True}, "seed"),
        ({"schedule": {"T": 0}}, "schedule.T"),
        ({"ablation": {"target": "grumpy_cat", "anchor": "grumpy_cat"}}, "differ"),
        ({"ablation": {"target": "grumpy_cat", "anchor": "cat", "scope": "attention"}}, "ablation.scope"),
        ({"ablation": {"target": "grumpy_cat", "anchor": "cat", "augmentation": {"scale_range": [1.1, 1.2]}}}, "scale_range"),
        ({"eval": {"far": ["cat"]}}, "eval.far[0]"),
        ({"eval": {"candidates": ["grumpy_cat", "dog"]}}, "missing the evaluation anchor"),
        ({"eval": {"synonyms": ["hound"]}}, None),
    ],
)
def test_field_rules(patch, fragment):
    doc = MINIMAL | patch
    if fragment is None:
        config_from_dict(doc)
    else:
        assert any(fragment in e for e in errors_of(doc))


def test_relative_paths_resolve_against_config_directory(tmp_path):
    (tmp_path / "sub").mkdir()
    path = tmp_path / "sub" / "exp.yaml"
    path.write_text(yaml.safe_dump(MINIMAL | {"output_dir": "../runs/x", "cache_dir": "cache"}))
    cfg = parse_config(path)
    assert cfg.output_dir.resolve() == (tmp_path / "runs" / "x").resolve()
    assert cfg.cache_dir.resolve() == (tmp_path / "sub" / "cache").resolve()


def test_seed_override_and_hashes():
    cfg = config_from_dict(dict(MINIMAL))
    other = cfg.with_seed(2)
    assert other.seed == 2 and cfg.seed == 1
    assert other.config_hash() != cfg.config_hash()
    assert other.pretrain_hash() != cfg.pretrain_hash()
    changed = config_from_dict(MINIMAL | {"ablation": {"target": "grumpy_cat", "anchor": "cat", "steps": 10}})
    assert changed.pretrain_hash() == cfg.pretrain_hash()
    assert changed.config_hash() != cfg.config_hash()
    with pytest.raises(ConfigError):
        cfg.with_seed(2**64)
