"""Accuracy evaluation: a deterministic surrogate and an external-process protocol.

External protocol, one request per process invocation:

* stdin: ``{"version": 1, "network": <NetworkConfig document>}``
* stdout: ``{"error_rate": <fraction>}`` (a ``version`` field, if present,
  must be 1)
"""

from __future__ import annotations

import json
import math
import shlex
import subprocess
from dataclasses import dataclass

from .nn_ir import NetworkConfig, count_macs

PROTOCOL_VERSION = 1


class EvaluatorFailure(RuntimeError):
    pass


class Timeout(EvaluatorFailure):
    pass


class ProtocolError(EvaluatorFailure):
    pass


class NonzeroExit(EvaluatorFailure):
    pass


@dataclass(frozen=True)
class EvaluatorSpec:
    kind: str = "surrogate"
    e_min: float = 0.03
    e_max: float = 0.60
    k_mac: float = 3.0
    k_bits: float = 2.0
    command: tuple[str, ...] = ()
    timeout: float = 600.0

    def __post_init__(self):
        if self.kind not in ("surrogate", "external"):
            raise ValueError(f"unknown evaluator kind {self.kind!r}")
        if not 0 <= self.e_min < self.e_max <= 1:
            raise ValueError("need 0 <= e_min < e_max <= 1")
        if self.kind == "external" and not self.command:
            raise ValueError("external evaluator needs a command")

    @classmethod
    def from_dict(cls, doc: dict) -> "EvaluatorSpec":
        doc = dict(doc)
        cmd = doc.pop("command", ())
        if isinstance(cmd, str):
            cmd = shlex.split(cmd)
        return cls(command=tuple(cmd), **doc)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "e_min": self.e_min, "e_max": self.e_max, "k_mac": self.k_mac,
            "k_bits": self.k_bits, "command": list(self.command), "timeout": self.timeout,
        }


def surrogate_evaluate(net: NetworkConfig, spec: EvaluatorSpec = EvaluatorSpec()) -> float:
    """Saturating-exponential error model, strictly decreasing in MACs and word widths."""
    bits = net.quant.feature_bits + net.quant.weight_bits
    # fixed evaluation order: exponent first, then a single exp
    z = -spec.k_mac * count_macs(net) / 1e6 - spec.k_bits * bits / 16
    return spec.e_min + (spec.e_max - spec.e_min) * math.exp(z)


def request_document(net: NetworkConfig) -> str:
    return json.dumps({"version": PROTOCOL_VERSION, "network": net.to_dict()}, sort_keys=True)


def parse_response(text: str) -> float:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"response is not JSON: {exc}") from None
    if not isinstance(doc, dict) or "error_rate" not in doc:
        raise ProtocolError("response lacks error_rate")
    if doc.get("version", PROTOCOL_VERSION) != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {doc['version']}")
    err = doc["error_rate"]
    if isinstance(err, bool) or not isinstance(err, (int, float)) or not 0 <= err <= 1:
        raise ProtocolError(f"error_rate {err!r} is not a fraction")
    return float(err)


def external_evaluate(spec: EvaluatorSpec, net: NetworkConfig) -> float:
    try:
        proc = subprocess.run(
            list(spec.command), input=request_document(net), capture_output=True,
            text=True, timeout=spec.timeout,
        )
    except subprocess.TimeoutExpired:
        raise Timeout(f"evaluator exceeded {spec.timeout} s") from None
    except OSError as exc:
        raise NonzeroExit(f"could not start evaluator: {exc}") from None
    if proc.returncode != 0:
        raise NonzeroExit(f"evaluator exited with {proc.returncode}: {proc.stderr.strip()[:200]}")
    return parse_response(proc.stdout)


def evaluate(spec: EvaluatorSpec, net: NetworkConfig) -> float:
    if spec.kind == "surrogate":
        return surrogate_evaluate(net, spec)
    return external_evaluate(spec, net)
