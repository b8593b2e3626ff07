import pytest

from rgbtfuse.ablation import VARIANTS, VariantResult, accuracy_table, format_table, variant_config
from rgbtfuse.config import TrainConfig
from rgbtfuse.data import Vocab
from rgbtfuse.pipeline import PairedSample

BASE = TrainConfig()


@pytest.mark.parametrize(
    "name,field,value",
    [
        ("no-text-attn", "text_attn", False),
        ("no-rgb-attn", "rgb_attn", False),
        ("direct-fusion", "gated", False),
        ("no-align-loss", "lambda_align", 0.0),
        ("no-contrastive-loss", "lambda_contr", 0.0),
        ("no-gate-loss", "lambda_gate", 0.0),
        ("trainable-blocks-2", "n_trainable_blocks", 2),
        ("trainable-blocks-all", "n_trainable_blocks", 6),
        ("no-masking", "mask_ratio", 0.0),
    ],
)
def test_variant_overrides(name, field, value):
    cfg = variant_config(BASE, name)
    assert getattr(cfg, field) == value
    changed = {k for k, v in cfg.to_dict().items() if BASE.to_dict()[k] != v}
    assert changed == {field}


def test_full_is_base_and_unknown_rejected():
    assert variant_config(BASE, "full") == BASE
    with pytest.raises(KeyError):
        variant_config(BASE, "w/o everything")
    assert len(VARIANTS) == 11


def sample(i, tag, kind, answer):
    v = Vocab()
    return PairedSample(f"s{i}", None, None, [1], [v.yes if answer == "yes" else v.no], tag, kind)


def test_accuracy_table_prompt_column():
    samples = [
        sample(0, "rgb+ir", "warm_and_light", "yes"),
        sample(1, "rgb+ir", "warm_or_light", "no"),
        sample(2, "rgb+ir", "other", "yes"),
        sample(3, "ir", "warm", "no"),
    ]
    preds = {"s0": "yes", "s1": "yes", "s2": "yes", "s3": "no"}
    acc = accuracy_table(preds, samples, Vocab().yes)
    assert acc["rgb+ir/prompt"] == 0.5
    assert acc["rgb+ir"] == pytest.approx(2 / 3)
    assert acc["ir"] == 1.0 and acc["overall"] == 0.75


def test_format_table_marks_missing():
    text = format_table([VariantResult("full", {"ir": 1.0, "overall": 0.5})])
    assert text.splitlines()[1] == "full,nan,1.0000,nan,nan,0.5000"
