import numpy as np
import pytest
import torch

from multilevel_clip.encoders import EncoderConfig, ScenarioModel, Tokenizer
from multilevel_clip.records import triplet_text
from multilevel_clip.synth import SceneConfig, generate_scene, render_dataset
from multilevel_clip.training import DEFAULT_TEMPLATES

SMALL_SCENES = SceneConfig(image_size=32, seed=0)


def words_for(records):
    texts = [r.action for r in records] + [o.name for r in records for o in r.objects]
    texts += [triplet_text(t) for r in records for rel in r.relations
              for t in [rel.triplet, *rel.negatives]]
    texts += list(DEFAULT_TEMPLATES) + ["right of", "left of", "above", "below", "outside of",
                                        "apart from", "inside", "touching"]
    return sorted({w for t in texts for w in t.replace("{label}", "").lower().split()})


def small_encoder_config(**kw):
    base = dict(embed_dim=16, patch_size=8, depth=1, heads=2, mlp_ratio=2, image_size=32,
                crop_size=16, max_tokens=12)
    base.update(kw)
    return EncoderConfig(**base)


@pytest.fixture(scope="session")
def small_records():
    return [generate_scene(SMALL_SCENES, seed=(0, i), scene_id=f"s{i}") for i in range(12)]


@pytest.fixture
def small_model(small_records):
    torch.manual_seed(0)
    model = ScenarioModel(small_encoder_config(), Tokenizer(words_for(small_records)))
    model.eval()
    return model


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("dataset")
    return render_dataset(SceneConfig(image_size=32, seed=5), 40, out)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ------------------------------------------------------- acceptance summary

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
