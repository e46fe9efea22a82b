"""Self-describing JSON checkpoints for trained networks and compiled automata."""

from __future__ import annotations

import json
from dataclasses import asdict

import numpy as np

from .fsa import CompiledFSA, compile_to_ssm, format_fsa, parse_fsa
from .model import Network, NetworkConfig
from .selection import Dictionary

FORMAT = "flash-pdssm-checkpoint/1"


class CheckpointError(ValueError):
    pass


def _pack(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "dtype": str(arr.dtype), "data": arr.ravel().tolist()}


def _unpack(d: dict) -> np.ndarray:
    return np.array(d["data"], dtype=d["dtype"]).reshape(d["shape"])


def checkpoint_dict(model) -> dict:
    if isinstance(model, Network):
        return {
            "format": FORMAT,
            "kind": "network",
            "config": asdict(model.config),
            "seed": model.seed,
            "mode": model.config.mode,
            "params": {k: _pack(v) for k, v in model.parameters().items()},
        }
    if isinstance(model, CompiledFSA):
        return {
            "format": FORMAT,
            "kind": "compiled_fsa",
            "config": {"automaton": format_fsa(model.automaton)},
            "seed": None,
            "mode": "real",
            "params": {k: _pack(v) for k, v in model.parameters().items()},
        }
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def save_checkpoint(model, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_dict(model), fh, sort_keys=True)
        fh.write("\n")


def from_dict(d: dict):
    if d.get("format") != FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {d.get('format')!r}; expected {FORMAT!r}")
    params = {k: _unpack(v) for k, v in d["params"].items()}
    if d["kind"] == "network":
        net = Network.init(NetworkConfig(**d["config"]), d["seed"])
        own = net.parameters()
        if set(own) != set(params):
            raise CheckpointError(f"parameter names differ: {sorted(set(own) ^ set(params))}")
        for k, arr in own.items():
            if arr.shape != params[k].shape:
                raise CheckpointError(f"{k}: shape {params[k].shape}, expected {arr.shape}")
            arr[...] = params[k]
        net.mark_updated()
        return net
    if d["kind"] == "compiled_fsa":
        c = compile_to_ssm(parse_fsa(d["config"]["automaton"]))
        c.dictionary = Dictionary(params.pop("dictionary"))
        for k, arr in params.items():
            setattr(c, k, arr)
        return c
    raise CheckpointError(f"unknown checkpoint kind {d['kind']!r}")


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as e:
            raise CheckpointError(f"not a JSON checkpoint: {e}") from None
    return from_dict(d)
