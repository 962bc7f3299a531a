"""Small builders shared by the CLI/service/acceptance tests."""

import numpy as np

from gridinsight import data, hvae


def tiny_insights():
    return (
        data.InsightSpec("a", "step_sag", (0, 1), (1, 2), (0, 1), (2, 3), (0.2, 0.3)),
        data.InsightSpec("b", "step_surge", (2, 3), (1, 2), (0, 1), (2, 3), (0.2, 0.3)),
    )


def tiny_spec(seed=0):
    return data.SyntheticSpec(m=4, t=4, seed=seed, insights=tiny_insights())


def tiny_dataset(n=16, seed=0):
    return data.generate_synthetic(tiny_spec(seed), n)


def tiny_model(seed=0, kind="conv"):
    cls = hvae.MODEL_KINDS[kind]
    return cls(hvae.tiny_config(), seed=seed)


def tiny_train_config_doc(epochs=2):
    return {
        "kind": "conv",
        "model": hvae.tiny_config().to_dict(),
        "train": {
            "epochs": epochs, "batch_size": 8, "base_lr": 0.005, "momentum": 0.9,
            "lr_phase1_epochs": 1, "lr_phase2_epochs": 1, "decay_every_phase2": 1,
            "warmup_epochs": 1, "seed": 0, "eval_every": 1, "eval_fraction": 0.25,
            "eval_mc_samples": 1,
        },
    }
