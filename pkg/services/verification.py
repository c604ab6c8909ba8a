"""
verification.py

Self-checks behind `omnifuse verify`: brute-force oracles for the match
matrix and the losses, closed-form loss values, finite-difference gradient
checks of every trainable part, unpool placement and date selection.

Each check returns a CheckResult; the report fails if any check fails.
`inject_fault` deliberately breaks one check so the failure path can be
exercised.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import List

import numpy as np
import torch

from config import TrainConfig
from models.encoders import ImageCodec, TemporalCodec, select_reconstruction_dates
from models.fusion import FusionNetwork
from models.schema import MatchKind, ModalityKind, ModalitySpec, MultimodalTile, TokenBatch, TokenIndex
from services.objectives import (
    build_match_matrix, contrastive_loss, naive_contrastive_loss, reconstruction_loss
)
from services.tokenizer import assemble_batch
from utils.gradcheck import gradient_check
from utils.seeding import numpy_rng, torch_generator

logger = logging.getLogger('omnifuse.verify')

FAULTS = ('grad', 'match')


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ''
    cases: int = 1


@dataclass
class VerificationReport:
    checks: List[CheckResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self):
        return all(check.passed for check in self.checks)

    @property
    def failing(self):
        return [check.name for check in self.checks if not check.passed]

    def lines(self):
        out = [f"{'PASS' if c.passed else 'FAIL'}  {c.name:<28} {c.cases:>5} case(s)  {c.detail}" for c in self.checks]
        out.append(f"{sum(c.passed for c in self.checks)}/{len(self.checks)} checks passed, "
                   f"{sum(c.cases for c in self.checks)} cases in {self.seconds:.1f}s")
        return out


# --- Oracles ---

def brute_force_match(batch, naive=False):
    """Applies the three pair rules one pair at a time."""
    t = len(batch)
    matrix = np.zeros((t, t), dtype=np.uint8)
    for i, a in enumerate(batch.indices):
        for j, b in enumerate(batch.indices):
            same_tile = a.tile_id == b.tile_id
            if i == j:
                matrix[i, j] = MatchKind.IGNORED
            elif same_tile and a.patch == b.patch and a.modality != b.modality:
                matrix[i, j] = MatchKind.POSITIVE
            elif same_tile and a.modality == b.modality and not naive:
                matrix[i, j] = MatchKind.IGNORED
            else:
                matrix[i, j] = MatchKind.NEGATIVE
    return matrix


def contrastive_oracle(embeddings, matrix, gamma):
    """Double loop over rows and columns, stabilized by the row maximum."""
    f = np.asarray(embeddings, dtype=np.float64)
    total = 0.0
    for i in range(len(f)):
        logits = [float(f[i] @ f[j]) / gamma for j in range(len(f))]
        counted = [j for j in range(len(f)) if matrix[i, j] != MatchKind.IGNORED]
        top = max(logits[j] for j in counted)
        num = sum(math.exp(logits[j] - top) for j in counted if matrix[i, j] == MatchKind.POSITIVE)
        den = sum(math.exp(logits[j] - top) for j in counted)
        total -= math.log(num / den)
    return total / len(f)


def reconstruction_oracle(decoded, targets, dates):
    """decoded / targets: lists of per-token arrays; dates: list of index lists or None."""
    total = 0.0
    for dec, tgt, keep in zip(decoded, targets, dates):
        dec, tgt = np.asarray(dec, dtype=np.float64), np.asarray(tgt, dtype=np.float64)
        if keep is not None:
            dec, tgt = dec[..., keep], tgt[..., keep]
        total += float(((dec - tgt) ** 2).sum()) / dec.size
    return total / len(decoded)


# --- Tiny instances ---

def index_batch(modalities, tiles, patches):
    """A TokenBatch of bare indices: `tiles` tiles with `patches` patches each, all modalities."""
    specs = [ModalitySpec(f"m{k}", ModalityKind.TIME_SERIES, 1, 1.0, max_length=1) for k in range(modalities)]
    indices, slots, partition, grids = [], [], {}, {}
    for t in range(tiles):
        tile_id = f"t{t}"
        start = len(indices)
        for spec in specs:
            for p in range(patches):
                indices.append(TokenIndex(spec.name, p, tile_id, (p + 0.5, 0.5)))
        partition[tile_id] = range(start, len(indices))
        grids[tile_id] = (patches, 1)
        slots.extend((tile_id, p, (p + 0.5, 0.5)) for p in range(patches))
    return TokenBatch(indices, [None] * len(indices), [None] * len(indices), partition, specs, grids, slots)


def tiny_specs():
    return [
        ModalitySpec("img", ModalityKind.IMAGE, 2, 0.25, patch_side_px=4),
        ModalitySpec("s2", ModalityKind.TIME_SERIES, 2, 1.0, max_length=3),
        ModalitySpec("s1", ModalityKind.TIME_SERIES, 2, 1.0, max_length=3),
    ]


def tiny_tile(rng, tile_id="tiny", grid=(2, 1)):
    gx, gy = grid
    return MultimodalTile(
        tile_id, grid,
        arrays={
            "img": rng.normal(size=(2, 4 * gy, 4 * gx)).astype(np.float32),
            "s2": rng.normal(size=(2, 3, gy, gx)).astype(np.float32),
            "s1": rng.normal(size=(2, 3, gy, gx)).astype(np.float32),
        },
        timestamps={"s2": np.array([10, 120, 250]), "s1": np.array([5, 60, 300])},
    )


def tiny_config(**overrides):
    values = dict(d=8, blocks=1, heads=2, ltae_heads=2, ltae_key_dim=4, rel_buckets=4, mask_ratio=0.5)
    values.update(overrides)
    return TrainConfig(**values)


# --- Checks ---

def check_match_matrix(seeds, fault=None):
    rng = numpy_rng(0, 'verify', 'match')
    bad = 0
    for _ in range(seeds):
        batch = index_batch(int(rng.integers(2, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        for naive in (False, True):
            got = build_match_matrix(batch, naive=naive)
            if fault == 'match':
                got = got.copy()
                got[0, 0] = MatchKind.NEGATIVE
            if not np.array_equal(got, brute_force_match(batch, naive)):
                bad += 1
    return CheckResult('match_matrix_oracle', bad == 0, f"{bad} mismatching batch(es)", seeds)


def check_closed_forms():
    batch = index_batch(3, 2, 2)
    f = torch.ones(len(batch), 4, dtype=torch.float64)
    full = float(contrastive_loss(f, build_match_matrix(batch), 0.1))
    naive = float(naive_contrastive_loss(f, batch, 0.1))
    ok = abs(full + math.log(2 / 10)) < 1e-9 and abs(naive + math.log(2 / 11)) < 1e-9
    return CheckResult('contrastive_closed_form', ok, f"full {full:.9f}, naive {naive:.9f}", 2)


def check_loss_oracles(seeds):
    rng = numpy_rng(0, 'verify', 'losses')
    worst = 0.0
    for _ in range(seeds):
        batch = index_batch(int(rng.integers(2, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        emb = rng.normal(size=(len(batch), 8))
        gamma = float(rng.uniform(0.1, 1.0))
        tensor = torch.from_numpy(emb)
        for naive in (False, True):
            matrix = build_match_matrix(batch, naive=naive)
            got = float(contrastive_loss(tensor, matrix, gamma))
            worst = max(worst, abs(got - contrastive_oracle(emb, matrix, gamma)))

        n = int(rng.integers(1, 6))
        length = int(rng.integers(1, 9))
        dec, tgt = rng.normal(size=(n, 3, length)), rng.normal(size=(n, 3, length))
        keep = rng.random((n, length)) < 0.5
        keep[np.arange(n), rng.integers(0, length, size=n)] = True
        img_dec, img_tgt = rng.normal(size=(2, 1, 2, 2)), rng.normal(size=(2, 1, 2, 2))
        got = float(reconstruction_loss(
            {'ts': torch.from_numpy(dec), 'img': torch.from_numpy(img_dec)},
            {'ts': torch.from_numpy(tgt), 'img': torch.from_numpy(img_tgt)},
            {'ts': torch.from_numpy(keep)},
        ))
        expected = reconstruction_oracle(
            list(dec) + list(img_dec), list(tgt) + list(img_tgt),
            [np.flatnonzero(k).tolist() for k in keep] + [None, None],
        )
        worst = max(worst, abs(got - expected))
    return CheckResult('loss_oracles', worst < 1e-6, f"max deviation {worst:.2e}", seeds)


def _grad_result(name, report):
    return CheckResult(name, report.passed, report.summary(), report.checked)


def check_gradients(fault=None):
    results = []
    gen = torch_generator(0, 'verify', 'grad')
    transform = (lambda name, g: g * 2 if name == 'enc_convs.0.weight' else g) if fault == 'grad' else None

    batch = index_batch(3, 2, 2)
    emb = torch.randn(len(batch), 6, generator=gen, dtype=torch.float64, requires_grad=True)
    matrix = build_match_matrix(batch)
    results.append(_grad_result('grad_contrastive', gradient_check(
        [('embeddings', emb)], lambda: contrastive_loss(emb, matrix, 0.5), tolerance=1e-4)))

    dec = torch.randn(3, 2, 5, generator=gen, dtype=torch.float64, requires_grad=True)
    tgt = torch.randn(3, 2, 5, generator=gen, dtype=torch.float64)
    keep = torch.tensor([[1, 0, 1, 0, 0], [0, 1, 1, 1, 0], [1, 1, 1, 1, 1]], dtype=torch.bool)
    results.append(_grad_result('grad_reconstruction', gradient_check(
        [('decoded', dec)], lambda: reconstruction_loss({'ts': dec}, {'ts': tgt}, {'ts': keep}), tolerance=1e-4)))

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(0)
        image = ImageCodec(2, 4, 8).double()
        temporal = TemporalCodec(2, 8, heads=2, key_dim=4).double()
        fusion = FusionNetwork(8, blocks=1, heads=2, rel_buckets=4, cell_m=1.0, max_grid=(3, 2)).double()
    x = torch.randn(3, 2, 4, 4, generator=gen, dtype=torch.float64)
    results.append(_grad_result('grad_image_codec', gradient_check(
        image.named_parameters(), lambda: ((image(x) - x) ** 2).sum(), grad_transform=transform)))

    values = torch.randn(2, 2, 3, generator=gen, dtype=torch.float64)
    days = torch.tensor([[3, 90, 200], [15, 16, 300]])
    valid = torch.ones(2, 3, dtype=torch.bool)
    results.append(_grad_result('grad_temporal_codec', gradient_check(
        temporal.named_parameters(), lambda: ((temporal(values, days, valid) - values) ** 2).sum())))

    tokens = torch.randn(6, 8, generator=gen, dtype=torch.float64)
    positions = np.array([[0.5, 0.5], [1.5, 0.5], [2.5, 0.5], [0.5, 1.5], [1.5, 1.5], [2.5, 1.5]])
    codes = np.zeros(6, dtype=np.int64)
    mask = torch.tensor([False, True, False, False, False, True])
    results.append(_grad_result('grad_fusion', gradient_check(
        fusion.named_parameters(),
        lambda: (fusion(tokens, mask, positions, codes, positions[:3], codes[:3]) ** 2).sum())))

    from main import create_model
    from services.training import pretrain_losses
    cfg = tiny_config()
    specs = tiny_specs()
    tile_batch = assemble_batch([tiny_tile(numpy_rng(0, 'verify', 'tile'))], specs, cell_m=1.0)
    model = create_model(specs, cfg, 1.0, (2, 1)).double()
    results.append(_grad_result('grad_full_model', gradient_check(
        model.named_parameters(), lambda: pretrain_losses(model, tile_batch, cfg, seed=3).total)))
    return results


def check_unpool_placement():
    codec = identity_image_codec(side=4)
    x = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
    x[0, 0, 2, 3] = 5.0
    x[0, 0, 0, 1] = 1.0
    z, trace = codec.encode(x)
    bypass = codec.decode(z, trace)
    expected = torch.zeros_like(x)
    expected[0, 0, 2, 3] = 5.0
    codec.bypass = False
    fixed = codec.decode(z, trace)
    corner = torch.zeros_like(x)
    corner[0, 0, 0, 0] = 5.0
    ok = torch.equal(bypass, expected) and torch.equal(fixed, corner)
    return CheckResult('unpool_placement', ok, "traced and top-left placements", 2)


def identity_image_codec(side=4, factors=(2, 2)):
    """Single-channel codec whose convolutions are the identity and whose activation is linear."""
    codec = ImageCodec(1, side, 1, pool_factors=factors, widths=(1,) * len(factors), activation='identity').double()
    with torch.no_grad():
        for conv in list(codec.enc_convs) + list(codec.dec_convs):
            conv.weight.zero_()
            conv.weight[0, 0, 1, 1] = 1.0
            conv.bias.zero_()
    return codec


def check_date_filter(seeds):
    rng = numpy_rng(0, 'verify', 'dates')
    bad, cases = 0, 0
    for length in (4, 8, 12, 61):
        for _ in range(seeds):
            weights = np.round(rng.dirichlet(np.ones(length)), 2)
            chosen = select_reconstruction_dates(weights, 0.25)
            k = max(1, math.ceil(0.25 * length))
            oracle = sorted(sorted(range(length), key=lambda i: (-weights[i], i))[:k])
            bad += chosen != oracle
            cases += 1
    return CheckResult('date_filter', bad == 0, f"{bad} mismatching trace(s)", cases)


def check_fusion_invariants():
    """Token order, other tiles and the content of masked tokens must not move the fused rows."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(1)
        fusion = FusionNetwork(8, blocks=2, heads=2, rel_buckets=4, cell_m=1.0, max_grid=(2, 2)).double().eval()
    gen = torch_generator(0, 'verify', 'fusion')
    cells = np.array([[0.5, 0.5], [1.5, 0.5], [0.5, 1.5]])
    positions = np.concatenate([cells, cells, cells, cells])  # two modalities x two tiles
    codes = np.repeat([0, 0, 1, 1], 3)
    slot_positions, slot_codes = np.concatenate([cells, cells]), np.repeat([0, 1], 3)
    tokens = torch.randn(12, 8, generator=gen, dtype=torch.float64)
    mask = torch.zeros(12, dtype=torch.bool)
    mask[[1, 7, 8]] = True

    with torch.no_grad():
        base = fusion(tokens, mask, positions, codes, slot_positions, slot_codes)
        order = torch.randperm(12, generator=gen)
        permuted = fusion(tokens[order], mask[order], positions[order.numpy()], codes[order.numpy()],
                          slot_positions, slot_codes)
        drift = float((permuted - base).abs().max())

        other = tokens.clone()
        other[codes == 1] = 0.0
        isolated = torch.equal(fusion(other, mask, positions, codes, slot_positions, slot_codes)[:3], base[:3])

        swapped = tokens.clone()
        swapped[mask] = torch.randn(int(mask.sum()), 8, generator=gen, dtype=torch.float64)
        substituted = torch.equal(fusion(swapped, mask, positions, codes, slot_positions, slot_codes), base)

    ok = drift <= 1e-5 and isolated and substituted
    detail = f"permutation drift {drift:.1e}, tile isolation {isolated}, mask independence {substituted}"
    return CheckResult('fusion_invariants', ok, detail, 3)


def run_verification(seeds=100, inject_fault=None):
    if inject_fault is not None and inject_fault not in FAULTS:
        raise ValueError(f"Unknown fault '{inject_fault}'. Known: {', '.join(FAULTS)}")
    started = time.time()
    report = VerificationReport()
    report.checks.append(check_match_matrix(seeds, inject_fault))
    report.checks.append(check_closed_forms())
    report.checks.append(check_loss_oracles(min(seeds, 50)))
    report.checks.extend(check_gradients(inject_fault))
    report.checks.append(check_unpool_placement())
    report.checks.append(check_date_filter(seeds))
    report.checks.append(check_fusion_invariants())
    report.seconds = time.time() - started
    for check in report.checks:
        log = logger.info if check.passed else logger.error
        log(f"{check.name}: {'pass' if check.passed else 'FAIL'} ({check.detail})")
    return report
