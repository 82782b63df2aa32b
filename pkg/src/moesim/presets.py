"""Built-in model presets.

The published per-expert sizes for these models are 18 MB (switch128) and
33 MB (qwen) without the MLP dimensions; the (d_model, d_ff, dtype_bytes)
triples below are chosen so that 2*d_model*d_ff*dtype_bytes reproduces
those byte sizes exactly (MiB), and are recorded in every emitted config
echo. They are calibration values, not claims about the real models'
dimensions.
"""

from __future__ import annotations

from moesim.core import ModelSpec

MODEL_PRESETS: dict[str, ModelSpec] = {
    # 12 MoE layers x 128 experts, 18 MiB per expert: 2*768*3072*4 bytes.
    "switch128": ModelSpec(
        num_layers=12,
        num_experts=128,
        d_model=768,
        d_ff=3072,
        dtype_bytes=4,
        non_moe_layer_time=0.0,
    ),
    # 24 MoE layers x 60 experts, 33 MiB per expert: 2*2048*4224*2 bytes.
    "qwen": ModelSpec(
        num_layers=24,
        num_experts=60,
        d_model=2048,
        d_ff=4224,
        dtype_bytes=2,
        non_moe_layer_time=0.0,
    ),
}


def model_preset(name: str) -> ModelSpec:
    try:
        return MODEL_PRESETS[name]
    except KeyError:
        known = ", ".join(sorted(MODEL_PRESETS))
        raise ValueError(f"unknown model preset {name!r} (known: {known})") from None
