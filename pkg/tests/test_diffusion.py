import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from scipy import integrate, stats
from torch.func import functional_call

from conftest import random_trajectory, write_run_config
from occ4d.config import load_config
from occ4d.diffusion import (
    Denoiser,
    DenoiserConfig,
    DiffusionSchedule,
    FlatTokens,
    ScheduleConfig,
    condition_vector,
    denoise_predict,
    diffusion_train_step,
    flatten_tokens,
    forward_noise,
    gaussian_nll,
    learned_log_variance,
    loss_simple,
    loss_vlb,
    mean_from_eps,
    model_outputs,
    normal_kl,
    positional_embedding,
    q_posterior,
    q_sample,
    simple_loss_terms,
    sinusoidal_embedding,
    vlb_terms,
)
from occ4d.errors import ConfigError, DataError, NumericalError
from occ4d.export import read_loss_csv
from occ4d.nn_utils import make_optimizer
from occ4d.occupancy import Trajectory
from occ4d.toyworld import TrajectoryKind, make_trajectory
from occ4d.training import cached_tokens, load_dataset, load_tokenizer, run_make_data, run_train_diffusion, run_train_tokenizer


def _randomize(model: torch.nn.Module, seed: int = 0, scale: float = 0.2) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for param in model.parameters():
            param.copy_(torch.randn(param.shape, generator=gen, dtype=param.dtype) * scale)


def test_schedule_arrays():
    sched = DiffusionSchedule.linear(1000)
    assert sched.G == 1000
    assert sched.betas[0] == pytest.approx(1e-4)
    assert sched.betas[-1] == pytest.approx(2e-2)
    assert np.all(np.diff(sched.alpha_bars) < 0)
    assert sched.alpha_bars[-1] < 1e-4
    for G in (10, 100):
        assert DiffusionSchedule.linear(G).alpha_bars[-1] < 1e-3
    cosine = DiffusionSchedule.cosine(100)
    assert np.all((cosine.betas > 0) & (cosine.betas <= 0.999))
    assert cosine.alpha_bars[-1] < 1e-3


def test_linear_schedule_rescales_endpoints_for_short_chains():
    sched = DiffusionSchedule.linear(100)
    assert sched.betas[0] == pytest.approx(1e-3)
    assert sched.betas[-1] == pytest.approx(0.2)
    short = DiffusionSchedule.linear(10)
    assert short.betas[0] == pytest.approx(1e-2)
    assert short.betas[-1] == pytest.approx(0.999)
    assert short.betas.max() <= 0.999


def test_schedule_config_validation():
    with pytest.raises(ConfigError):
        ScheduleConfig(steps=0)
    with pytest.raises(ConfigError):
        ScheduleConfig(kind="quadratic")
    with pytest.raises(ConfigError):
        ScheduleConfig(beta_start=0.1, beta_end=0.01)
    assert DiffusionSchedule.from_config(ScheduleConfig(steps=50, kind="cosine")).G == 50
    assert DiffusionSchedule.from_config(ScheduleConfig(steps=50), steps=10).G == 10


def test_step_range(schedule):
    x0 = flatten_tokens(torch.zeros(4, 2, 4, 4))
    with pytest.raises(ValueError):
        forward_noise(x0, 0, torch.zeros(4, 32), schedule)
    with pytest.raises(ValueError):
        forward_noise(x0, schedule.G + 1, torch.zeros(4, 32), schedule)


def test_flatten_order():
    grid = torch.arange(2 * 2 * 3 * 4, dtype=torch.float32).reshape(2, 2, 3, 4)
    flat = flatten_tokens(grid)
    assert flat.values.shape == (2, 24)
    # position index m = (t * h' + h) * w' + w
    assert flat.values[1, (1 * 3 + 2) * 4 + 3] == grid[1, 1, 2, 3]
    assert torch.equal(flat.unflatten(), grid)


def test_positional_embedding_values():
    emb = positional_embedding(8, 5)
    assert emb.shape == (8, 5)
    i = 3
    for k in range(4):
        freq = 10000 ** (-2 * k / 8)
        assert emb[2 * k, i].item() == pytest.approx(math.sin(i * freq), abs=1e-6)
        assert emb[2 * k + 1, i].item() == pytest.approx(math.cos(i * freq), abs=1e-6)
    assert torch.all(emb[0::2, 0] == 0)
    assert torch.all(emb[1::2, 0] == 1)
    with pytest.raises(ValueError):
        sinusoidal_embedding(torch.arange(3), 7)


def test_forward_noise_endpoints_and_linearity(schedule, rng):
    x0 = flatten_tokens(torch.from_numpy(rng.normal(size=(4, 2, 4, 4))).float())
    noise = torch.from_numpy(rng.normal(size=(4, 32))).float()
    g = 7
    x_g = forward_noise(x0, g, noise, schedule)
    a = float(schedule.sqrt_alpha_bars[g - 1])
    b = float(schedule.sqrt_one_minus_alpha_bars[g - 1])
    torch.testing.assert_close(x_g.values, a * x0.values + b * noise)
    zero = forward_noise(x0, g, torch.zeros_like(noise), schedule)
    torch.testing.assert_close(zero.values, a * x0.values)
    with pytest.raises(DataError):
        forward_noise(x0, g, torch.zeros(4, 31), schedule)


def test_forward_process_statistics():
    # a schedule whose first step already has abar = 0.5
    sched = DiffusionSchedule.from_alpha_bars([0.5, 0.25])
    n = 100_000
    x0 = FlatTokens(torch.full((1, n), 1.3, dtype=torch.float64), (1, 1, n))
    gen = torch.Generator().manual_seed(0)
    noise = torch.randn((1, n), generator=gen, dtype=torch.float64)
    x_g = forward_noise(x0, 1, noise, sched).values
    expected_mean = math.sqrt(0.5) * 1.3
    assert abs(x_g.mean().item() - expected_mean) <= 3 * math.sqrt(0.5) / math.sqrt(n)
    assert x_g.var().item() == pytest.approx(0.5, rel=0.02)


@pytest.mark.parametrize("seed", range(20))
def test_posterior_matches_numeric_bayes(seed):
    rng = np.random.default_rng(seed)
    abar_g = rng.uniform(0.05, 0.9)
    abar_prev = rng.uniform(abar_g + 0.02, min(0.999, abar_g + 0.5))
    sched = DiffusionSchedule.from_alpha_bars([abar_prev, abar_g])
    x0, x_g = rng.normal(size=2)
    alpha = abar_g / abar_prev
    # prior q(x_{g-1} | x0) times likelihood q(x_g | x_{g-1}), normalised numerically
    prior = stats.norm(math.sqrt(abar_prev) * x0, math.sqrt(1 - abar_prev))

    def density(x):
        return prior.pdf(x) * stats.norm.pdf(x_g, math.sqrt(alpha) * x, math.sqrt(1 - alpha))

    lo = prior.mean() - 12 * prior.std()
    hi = prior.mean() + 12 * prior.std()
    z = integrate.quad(density, lo, hi, epsabs=1e-13, epsrel=1e-12, limit=200)[0]
    mean = integrate.quad(lambda x: x * density(x), lo, hi, epsabs=1e-13, epsrel=1e-12, limit=200)[0] / z
    second = integrate.quad(lambda x: x * x * density(x), lo, hi, epsabs=1e-13, epsrel=1e-12, limit=200)[0] / z
    var = second - mean**2

    steps = torch.tensor([2])
    post_mean, post_var, _ = q_posterior(
        torch.tensor([[x0]], dtype=torch.float64), torch.tensor([[x_g]], dtype=torch.float64), steps, sched
    )
    assert post_mean.item() == pytest.approx(mean, abs=1e-6)
    assert post_var.item() == pytest.approx(var, abs=1e-6)


def test_normal_kl_closed_form():
    m1, v1, m2, v2 = 0.3, 0.5, -0.2, 1.7
    expected = math.log(math.sqrt(v2) / math.sqrt(v1)) + (v1 + (m1 - m2) ** 2) / (2 * v2) - 0.5
    got = normal_kl(*(torch.tensor(v, dtype=torch.float64) for v in (m1, math.log(v1), m2, math.log(v2))))
    assert got.item() == pytest.approx(expected, abs=1e-12)
    same = normal_kl(torch.tensor(0.4), torch.tensor(0.1), torch.tensor(0.4), torch.tensor(0.1))
    assert same.item() == pytest.approx(0.0, abs=1e-7)
    nll = gaussian_nll(torch.tensor(0.0), torch.tensor(0.0), torch.tensor(0.0))
    assert nll.item() == pytest.approx(0.5 * math.log(2 * math.pi))


def test_simple_loss_values():
    gen = torch.Generator().manual_seed(3)
    noise = torch.randn(1, 100_000, generator=gen, dtype=torch.float64)
    assert simple_loss_terms(noise, noise).item() == 0.0
    assert simple_loss_terms(torch.zeros_like(noise), noise).item() == pytest.approx(0.5, rel=0.02)
    eps_hat = torch.randn(1, 50, generator=gen)
    eps = torch.randn(1, 50, generator=gen)
    perm = torch.randperm(50, generator=gen)
    assert simple_loss_terms(eps_hat[:, perm], eps[:, perm]).item() == pytest.approx(
        simple_loss_terms(eps_hat, eps).item(), rel=1e-6
    )


def test_denoiser_zero_init(tiny_denoiser_cfg, schedule, rng):
    model = Denoiser(tiny_denoiser_cfg)
    x = FlatTokens(torch.randn(4, 32), (2, 4, 4))
    eps, logvar = denoise_predict(x, random_trajectory(rng), 5, model, schedule)
    assert torch.count_nonzero(eps.values) == 0
    # v = 0 interpolates halfway between the two log-variances
    mid = 0.5 * (
        math.log(schedule.betas[4]) + schedule.posterior_log_variance_clipped[4]
    )
    assert torch.allclose(logvar, torch.full_like(logvar, mid))
    for block in model.blocks:
        assert torch.count_nonzero(block.adaLN_modulation[-1].weight) == 0


def test_denoiser_shapes_and_errors(tiny_denoiser_cfg, schedule, rng):
    model = Denoiser(tiny_denoiser_cfg)
    _randomize(model)
    x = torch.randn(3, 4, 32)
    traj = torch.randn(3, 4, 2)
    eps, values = model(x, traj, schedule.model_time(torch.tensor([1, 2, 3])))
    assert eps.shape == values.shape == (3, 4, 32)
    with pytest.raises(DataError):
        model(torch.randn(3, 4, 31), traj, torch.ones(3))
    with pytest.raises(DataError):
        model(x, torch.randn(3, 5, 2), torch.ones(3))
    fixed = Denoiser(replace(tiny_denoiser_cfg, learn_sigma=False))
    eps, values = fixed(x, traj, torch.ones(3))
    assert values is None
    with pytest.raises(ConfigError):
        loss_vlb(FlatTokens(x[0], (2, 4, 4)), random_trajectory(rng), 3, fixed, schedule)


def test_denoiser_config_validation():
    with pytest.raises(ConfigError):
        DenoiserConfig(width=15)
    with pytest.raises(ConfigError):
        DenoiserConfig(width=16, heads=3)


def test_condition_is_additive(tiny_denoiser_cfg, schedule, rng):
    model = Denoiser(tiny_denoiser_cfg)
    _randomize(model)
    traj = random_trajectory(rng)
    both = condition_vector(traj, 4, model, schedule)
    no_traj = Denoiser(replace(tiny_denoiser_cfg, use_trajectory_embedding=False))
    no_time = Denoiser(replace(tiny_denoiser_cfg, use_timestep_embedding=False))
    no_traj.load_state_dict(model.state_dict())
    no_time.load_state_dict(model.state_dict())
    nu = condition_vector(traj, 4, no_traj, schedule)
    delta = condition_vector(traj, 4, no_time, schedule)
    torch.testing.assert_close(both, nu + delta)


def test_trajectory_embedding_ignores_absolute_origin(tiny_denoiser_cfg, schedule, rng):
    model = Denoiser(tiny_denoiser_cfg)
    _randomize(model)
    traj = random_trajectory(rng)
    moved = Trajectory(traj.positions + np.array([10.0, -4.0], dtype=np.float32))
    torch.testing.assert_close(
        condition_vector(traj, 2, model, schedule), condition_vector(moved, 2, model, schedule), atol=1e-5, rtol=1e-5
    )


def test_conditioning_changes_prediction(tiny_denoiser_cfg, schedule):
    model = Denoiser(tiny_denoiser_cfg)
    _randomize(model)
    x = FlatTokens(torch.randn(4, 32), (2, 4, 4))
    straight = make_trajectory(TrajectoryKind.straight(), 4, 0.5)
    turn = make_trajectory(TrajectoryKind.turn_right(3.0, 1.0), 4, 0.5)
    a, _ = denoise_predict(x, straight, 3, model, schedule)
    b, _ = denoise_predict(x, turn, 3, model, schedule)
    assert not torch.allclose(a.values, b.values)


def test_permutation_equivariance_without_positions(tiny_denoiser_cfg, schedule, rng):
    model = Denoiser(replace(tiny_denoiser_cfg, use_positional_embedding=False)).double()
    _randomize(model)
    x = torch.randn(1, 4, 32, dtype=torch.float64)
    traj = torch.from_numpy(random_trajectory(rng).positions.astype(np.float64)).unsqueeze(0)
    perm = torch.randperm(32)
    steps = torch.tensor([6])
    eps, logvar = model_outputs(model.eval(), x, traj, steps, schedule)
    eps_p, logvar_p = model_outputs(model, x[:, :, perm], traj, steps, schedule)
    torch.testing.assert_close(eps_p, eps[:, :, perm])
    torch.testing.assert_close(logvar_p, logvar[:, :, perm])


def test_oracle_noise_gives_zero_simple_loss(tiny_denoiser_cfg, schedule, rng):
    model = Denoiser(replace(tiny_denoiser_cfg, learn_sigma=False))
    x0 = FlatTokens(torch.randn(4, 32), (2, 4, 4))
    # a zero-initialised head predicts zero noise
    assert loss_simple(x0, random_trajectory(rng), 3, torch.zeros(4, 32), model, schedule).item() == 0.0


def test_vlb_is_non_negative_kl_and_nll_at_first_step(tiny_denoiser_cfg, schedule, rng):
    model = Denoiser(tiny_denoiser_cfg)
    _randomize(model)
    x0 = FlatTokens(torch.randn(4, 32), (2, 4, 4))
    traj = random_trajectory(rng)
    gen = torch.Generator().manual_seed(0)
    for g in (2, 10, schedule.G):
        assert loss_vlb(x0, traj, g, model, schedule, generator=gen).item() >= 0
    noise = torch.randn(4, 32, generator=gen)
    first = loss_vlb(x0, traj, 1, model, schedule, noise=noise)
    x1 = forward_noise(x0, 1, noise, schedule)
    eps, logvar = denoise_predict(x1, traj, 1, model, schedule)
    steps = torch.tensor([1])
    mean = mean_from_eps(x1.values, eps.values, steps, schedule)
    expected = gaussian_nll(x0.values, mean, logvar).mean()
    torch.testing.assert_close(first, expected)


def test_vlb_mean_gradient_is_detached(tiny_denoiser_cfg, schedule):
    x0 = torch.randn(2, 4, 32)
    x_g = torch.randn(2, 4, 32)
    steps = torch.tensor([3, 5])
    eps_hat = torch.randn(2, 4, 32, requires_grad=True)
    logvar = torch.zeros(2, 4, 32, requires_grad=True)
    vlb_terms(x0, x_g, steps, eps_hat, logvar, schedule).sum().backward()
    assert eps_hat.grad is None
    assert logvar.grad is not None
    eps_hat2 = eps_hat.detach().clone().requires_grad_(True)
    vlb_terms(x0, x_g, steps, eps_hat2, logvar.detach(), schedule, detach_mean=False).sum().backward()
    assert eps_hat2.grad is not None


def test_denoiser_gradients_match_finite_differences(schedule):
    cfg = DenoiserConfig(token_channels=2, token_grid=(1, 2, 2), traj_len=3, width=8, depth=1, heads=2, mlp_ratio=2.0)
    model = Denoiser(cfg).double()
    _randomize(model, scale=0.3)
    assert sum(p.numel() for p in model.parameters()) <= 5000
    gen = torch.Generator().manual_seed(5)
    x0 = torch.randn(2, 2, 4, generator=gen, dtype=torch.float64)
    noise = torch.randn(2, 2, 4, generator=gen, dtype=torch.float64)
    traj = torch.randn(2, 3, 2, generator=gen, dtype=torch.float64)
    steps = torch.tensor([1, 9])
    x_g = q_sample(x0, steps, noise, schedule)
    names = [n for n, _ in model.named_parameters()]
    params = tuple(p.detach().clone().requires_grad_(True) for _, p in model.named_parameters())

    def loss(*tensors):
        t = schedule.model_time(steps).to(torch.float64)
        eps, values = functional_call(model, dict(zip(names, tensors)), (x_g, traj, t))
        logvar = learned_log_variance(values, steps, schedule)
        l_simple = simple_loss_terms(eps, noise).mean()
        l_vlb = vlb_terms(x0, x_g, steps, eps, logvar, schedule, detach_mean=False).mean()
        return l_simple + l_vlb

    assert torch.autograd.gradcheck(loss, params, eps=1e-5, rtol=1e-4, atol=1e-7)


def test_train_step_stages(tiny_denoiser_cfg, schedule):
    model = Denoiser(tiny_denoiser_cfg)
    optimizer = make_optimizer(model.parameters(), 1e-3, 0.0)
    tokens = torch.randn(2, 4, 32)
    trajs = torch.randn(2, 4, 2)
    gen = torch.Generator().manual_seed(0)
    simple = diffusion_train_step(tokens, trajs, model, optimizer, schedule, "simple", 1e-3, gen, step=0)
    full = diffusion_train_step(tokens, trajs, model, optimizer, schedule, "full", 1e-3, gen, step=1)
    assert simple.stage == "simple" and simple.total == pytest.approx(simple.l_simple)
    assert full.total == pytest.approx(full.l_simple + 1e-3 * full.l_vlb, rel=1e-5)
    with pytest.raises(ValueError):
        diffusion_train_step(tokens, trajs, model, optimizer, schedule, "both", 1e-3)
    fixed = Denoiser(replace(tiny_denoiser_cfg, learn_sigma=False))
    with pytest.raises(ConfigError):
        diffusion_train_step(tokens, trajs, fixed, make_optimizer(fixed.parameters(), 1e-3, 0.0), schedule, "full", 1e-3)


def test_train_step_is_deterministic(tiny_denoiser_cfg, schedule):
    records = []
    for _ in range(2):
        torch.manual_seed(0)
        model = Denoiser(tiny_denoiser_cfg)
        optimizer = make_optimizer(model.parameters(), 1e-3, 0.0)
        gen = torch.Generator().manual_seed(1)
        tokens = torch.randn(2, 4, 32, generator=gen)
        trajs = torch.randn(2, 4, 2, generator=gen)
        records.append([
            diffusion_train_step(tokens, trajs, model, optimizer, schedule, "full", 1e-3, gen, step=s).total
            for s in range(3)
        ])
    assert records[0] == records[1]


def test_non_finite_tokens_are_reported(tiny_denoiser_cfg, schedule):
    model = Denoiser(tiny_denoiser_cfg)
    _randomize(model)
    x = torch.full((1, 4, 32), float("nan"))
    with pytest.raises(NumericalError, match="block 0"):
        model(x, torch.zeros(1, 4, 2), torch.ones(1))


@pytest.mark.slow
def test_denoiser_overfits_cached_token_grids(tmp_path):
    path = write_run_config(
        tmp_path,
        world={"dims": [8, 16, 16, 4]},
        data={"kinds": ["straight", "turn_right", "motionless", "accelerate"], "clips_per_kind": 16, "holdout_fraction": 0.0},
        tokenizer={"levels": 2, "latent_channels": 16, "codebook_size": 64, "attn_groups": 8},
        diffusion={"width": 128, "depth": 4, "heads": 4},
        schedule={"steps": 1000, "kind": "linear"},
        optim={
            "lr": 2.0e-3, "batch_size": 8, "tokenizer_steps": 2000, "diffusion_steps": 5000,
            "simple_fraction": 1.0, "eval_interval": 1000, "checkpoint_interval": 1000,
        },
    )
    cfg = load_config(path)
    run_make_data(cfg)
    tokenizer_path = run_train_tokenizer(cfg)
    dataset = load_dataset(cfg)
    tokens = cached_tokens(cfg, dataset, load_tokenizer(tokenizer_path, cfg), tokenizer_path)
    assert tokens.shape[0] == 64

    run_train_diffusion(cfg, tokenizer_path)
    losses = [float(row["l_simple"]) for row in read_loss_csv(cfg.paths.output_root / "diffusion_loss.csv")]
    assert len(losses) == 5000
    assert np.mean(losses[-50:]) < 0.1 * np.mean(losses[:50])
