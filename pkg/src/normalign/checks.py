"""The gradient verification suite shared by the CLI and the test harness.

Covers every loss at random non-degenerate points plus an end-to-end check
through a micro model (T=2, d_e=3, two modalities, 2 classes per head).

Two mechanisms are excluded from finite differencing by construction, because
their backward pass is intentionally not the derivative of their forward
value: the gradient reversal layer (verified instead by the sign-flip
identity ``grad(reversed path) == -lambda * grad(plain path)``) and the
detached attention/entropy weights (verified by value oracles in the unit
tests). The end-to-end check therefore differences the classification +
norm-alignment + consensus objective through every model parameter, and the
adversarial cross-entropy through the discriminator parameters, where finite
differences are mathematically meaningful.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gradcheck import CheckReport, finite_diff_check
from .losses import (
    LossParts,
    LossWeights,
    ModalityBatch,
    attentive_entropy_loss,
    classification_loss,
    domain_adversarial_loss,
    mec_loss,
    rna_loss,
    rna_uda_loss,
    thna_loss,
    total_uda_loss,
)
from .models import StreamConfig, StreamModel


def micro_config() -> StreamConfig:
    return StreamConfig(
        modalities=["rgb", "audio"],
        input_dims={"rgb": 3, "audio": 2},
        frames_per_clip=2,
        hidden_sizes=[3],
        embed_dim=3,
        trm_scales=[2],
        relation_dim=3,
        trm_hidden=4,
        num_verbs=2,
        num_nouns=2,
        num_domains=2,
        disc_hidden=3,
        fusion="mid",
    )


def _micro_batch(rng: np.random.Generator, n_clips: int, cfg: StreamConfig):
    clips = {
        m: 1.5 * rng.normal(size=(n_clips * cfg.frames_per_clip, cfg.input_dims[m]))
        for m in cfg.modalities
    }
    verbs = rng.integers(0, cfg.num_verbs, size=n_clips)
    nouns = rng.integers(0, cfg.num_nouns, size=n_clips)
    return clips, verbs, nouns


def _core_objective(model: StreamModel, clips_data, verbs, nouns, weights: LossWeights) -> Tensor:
    """cls + rna + thna + mec through the full model, no reversal paths."""
    clips = {m: Tensor(v) for m, v in clips_data.items()}
    n_clips = verbs.shape[0]
    fp = model.forward(clips, n_clips)
    branch = fp.branches[0]
    cls = classification_loss(branch.verb_logits, verbs) + classification_loss(branch.noun_logits, nouns)
    rna = rna_loss([ModalityBatch(m, fp.frame_embeddings[m]) for m in model.config.modalities])
    thna = thna_loss([[branch.relations[k] for k in model.config.trm_scales]], radius=2.0)
    mec = mec_loss([branch.verb_logits])
    parts = LossParts(cls=cls, rna=rna, thna=thna, mec=mec)
    return total_uda_loss(parts, weights)


def _adversarial_objective(model: StreamModel, clips_data, domains, weights: LossWeights) -> Tensor:
    clips = {m: Tensor(v) for m, v in clips_data.items()}
    n_clips = domains.shape[0]
    fp = model.forward(clips, n_clips, lambda_d=0.4, adversarial=True)
    branch = fp.branches[0]
    t = model.config.frames_per_clip
    frame_domains = np.repeat(domains, t)
    adv_frame = domain_adversarial_loss(branch.domain_frame, frame_domains)
    adv_rel = None
    for k in model.config.trm_scales:
        term = domain_adversarial_loss(branch.domain_relation[k], domains)
        adv_rel = term if adv_rel is None else adv_rel + term
    adv_video = domain_adversarial_loss(branch.domain_video, domains)
    parts = LossParts(adversarial=(adv_frame, adv_rel, adv_video))
    return total_uda_loss(parts, weights)


def _check_model_params(name, model, param_names, objective, step, tol) -> list[CheckReport]:
    reports = []
    for pname in param_names:
        original = model.params[pname]

        def f(x: Tensor) -> Tensor:
            model.params[pname] = x
            try:
                return objective()
            finally:
                model.params[pname] = original

        reports.append(
            finite_diff_check(f, Tensor(original.data.copy()), step=step, tol=tol, name=f"{name}[{pname}]")
        )
    return reports


def _worst(name: str, reports: list[CheckReport], tol: float) -> CheckReport:
    worst = max(reports, key=lambda r: r.max_rel_err)
    return CheckReport(
        name=name,
        max_rel_err=worst.max_rel_err,
        tol=tol,
        passed=all(r.passed for r in reports),
        n_checked=sum(r.n_checked for r in reports),
    )


def gradient_suite(seed: int = 0, tol: float = 1e-4, step: float = 1e-5) -> list[CheckReport]:
    """Run every gradient check once; deterministic in the seed."""
    rng = np.random.default_rng(seed)
    reports: list[CheckReport] = []

    audio = Tensor(rng.normal(size=(8, 32)))
    reports.append(
        finite_diff_check(
            lambda x: rna_loss([ModalityBatch("rgb", x), ModalityBatch("audio", audio)]),
            Tensor(rng.normal(size=(8, 16))),
            step=step,
            tol=tol,
            name="rna_loss",
        )
    )

    tgt = [ModalityBatch("rgb", Tensor(rng.normal(size=(6, 16))), "target"),
           ModalityBatch("audio", Tensor(rng.normal(size=(6, 32))), "target")]
    src_audio = Tensor(rng.normal(size=(8, 32)))
    reports.append(
        finite_diff_check(
            lambda x: rna_uda_loss([ModalityBatch("rgb", x), ModalityBatch("audio", src_audio)], tgt),
            Tensor(rng.normal(size=(8, 16))),
            step=step,
            tol=tol,
            name="rna_uda_loss",
        )
    )

    other_scales = [Tensor(rng.normal(size=(6, 8)) * 3) for _ in range(2)]
    reports.append(
        finite_diff_check(
            lambda x: thna_loss([[x, other_scales[0]], [other_scales[1]]], radius=4.0),
            Tensor(rng.normal(size=(6, 8)) * 3),
            step=step,
            tol=tol,
            name="thna_loss",
        )
    )

    second_stream = Tensor(rng.normal(size=(8, 4)) * 2)
    reports.append(
        finite_diff_check(
            lambda x: mec_loss([x, second_stream]),
            Tensor(rng.normal(size=(8, 4)) * 2),
            step=step,
            tol=tol,
            name="mec_loss",
        )
    )

    labels = rng.integers(0, 4, size=8)
    reports.append(
        finite_diff_check(
            lambda x: classification_loss(x, labels),
            Tensor(rng.normal(size=(8, 4))),
            step=step,
            tol=tol,
            name="classification_loss",
        )
    )

    domains = rng.integers(0, 3, size=8)
    reports.append(
        finite_diff_check(
            lambda x: domain_adversarial_loss(x, domains),
            Tensor(rng.normal(size=(8, 3))),
            step=step,
            tol=tol,
            name="domain_adversarial_loss",
        )
    )

    dom_logits = Tensor(rng.normal(size=(8, 2)))
    reports.append(
        finite_diff_check(
            lambda x: attentive_entropy_loss(x, dom_logits),
            Tensor(rng.normal(size=(8, 4))),
            step=step,
            tol=tol,
            name="attentive_entropy_loss",
        )
    )

    reports.append(_grl_identity_check(rng, tol))

    cfg = micro_config()
    model = StreamModel(cfg, seed=seed)
    clips_data, verbs, nouns = _micro_batch(rng, n_clips=3, cfg=cfg)
    weights = LossWeights(lambda_rna=1.0, lambda_thna=0.5, radius=2.0, lambda_mec=0.2, gamma_attentive=0.0)
    core = _check_model_params(
        "e2e_core",
        model,
        model.param_names(),
        lambda: _core_objective(model, clips_data, verbs, nouns, weights),
        step,
        tol,
    )
    reports.append(_worst("e2e_core_model", core, tol))

    domains = rng.integers(0, 2, size=3)
    disc_names = [n for n in model.param_names() if n.startswith("disc.")]
    adv = _check_model_params(
        "e2e_adv",
        model,
        disc_names,
        lambda: _adversarial_objective(model, clips_data, domains, weights),
        step,
        tol,
    )
    reports.append(_worst("e2e_adversarial_discriminators", adv, tol))

    return reports


def _grl_identity_check(rng: np.random.Generator, tol: float) -> CheckReport:
    """grad through (grad_reverse -> mlp -> CE) == -lambda * grad without reversal."""
    w = Tensor(rng.normal(size=(5, 3)))
    feats = rng.normal(size=(6, 5))
    labels = rng.integers(0, 3, size=6)
    lam = 0.8

    plain = Tensor(feats, requires_grad=True)
    domain_adversarial_loss(ad.matmul(plain, w), labels).backward()
    flipped = Tensor(feats, requires_grad=True)
    domain_adversarial_loss(ad.matmul(ad.grad_reverse(flipped, lam), w), labels).backward()

    err = float(np.abs(flipped.grad + lam * plain.grad).max())
    return CheckReport(name="grad_reverse_identity", max_rel_err=err, tol=tol, passed=err <= 1e-10, n_checked=plain.grad.size)
