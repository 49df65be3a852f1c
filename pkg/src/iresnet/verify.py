"""Invariant battery behind ``iresnet verify``."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .errors import ConfigError
from .gradcheck import gradient_suite
from .model import (DEFAULT_PARAM_TARGET, DES_PARAM_TARGET, ARCHITECTURE, ModelConfig, audit_architecture,
                    build_model, count_params)
from .oracles import oracle_trials

GRAD_TOL = 1e-4
ORACLE_TOL = 1e-6
PARAM_TOL = 0.03


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""

    def line(self):
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}" + (f"  {self.detail}" if self.detail else "")


def gradient_checks(trials=10, seed=0):
    out = []
    for op, errs in gradient_suite(trials, seed).items():
        worst = max(errs)
        out.append(Check(f"grad.{op}", worst < GRAD_TOL, f"max_rel_err={worst:.2e} over {len(errs)} shapes"))
    return out


def oracle_checks(trials=50, seed=0):
    out = []
    for op, errs in oracle_trials(trials, seed).items():
        worst = max(errs)
        out.append(Check(f"oracle.{op}", worst <= ORACLE_TOL, f"max_rel_err={worst:.2e} over {len(errs)} cases"))
    return out


def architecture_checks(overrides=None, refine_iters=1):
    """Table audit and parameter counts of the full-width model."""
    model = build_model(ModelConfig(channel_mult=Fraction(1), refine_iters=refine_iters), overrides=overrides)
    out = []
    for row in audit_architecture(model):
        detail = f"expected={row.expected} built={row.actual}"
        if row.note:
            detail += f" ({row.note})"
        out.append(Check(f"table.{row.row}", row.ok, detail))
    total = count_params(model)
    des = count_params(model, ("stem", "des"))
    dev = total / DEFAULT_PARAM_TARGET - 1
    ddev = des / DES_PARAM_TARGET - 1
    out.append(Check("params.total", abs(dev) <= PARAM_TOL,
                     f"count={total} target={DEFAULT_PARAM_TARGET:.0f} deviation={100 * dev:+.2f}%"))
    out.append(Check("params.des_only", abs(ddev) <= PARAM_TOL,
                     f"count={des} target={DES_PARAM_TARGET:.0f} deviation={100 * ddev:+.2f}%"))
    return out


def refinement_param_checks(iters=(1, 2, 3), channel_mult=Fraction(1)):
    counts = [count_params(build_model(ModelConfig(channel_mult=channel_mult, refine_iters=k))) for k in iters]
    return [Check("params.refine_iters_invariant", len(set(counts)) == 1,
                  " ".join(f"iters{k}={c}" for k, c in zip(iters, counts)))]


def run_all(inject_fault=None, grad_trials=10, echo=None):
    """Every check in order; ``inject_fault`` widens that row's output by one channel."""
    overrides = None
    if inject_fault:
        base = build_model(ModelConfig(channel_mult=Fraction(1, 64)))
        if inject_fault not in base.layers:
            raise ConfigError(f"cannot inject fault: no layer named {inject_fault!r}")
        full = {r[0]: r[5] for r in ARCHITECTURE}
        overrides = {inject_fault: full.get(inject_fault, 1) + 1}
    checks = []
    for group in (lambda: gradient_checks(grad_trials), oracle_checks,
                  lambda: architecture_checks(overrides), refinement_param_checks):
        for c in group():
            checks.append(c)
            if echo:
                echo(c.line())
    return checks

