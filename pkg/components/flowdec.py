# hierflow
# This module provides the conditional flow matching decoder that generates mel-spectrograms from the visual encoding mu.
#
# This module is capable of:
# [X] The optimal transport flow and its target vector field
# [X] Uniform and cosine time step sampling
# [X] OT-CFM loss with condition dropout, encoder negative log-likelihood, total loss
# [X] The U-shaped vector field network (residual 1-D convolutions, snake-beta attention bottleneck, skips)
# [X] A learned null condition for classifier-free guidance
# [X] Euler sampling with classifier-free guidance and the few-step vs many-step trajectory gap
# [X] A small per-row MLP vector field for 2-D toy problems (Gaussian mixture conditioned on the component label)

import math

import torch
from torch import nn

import lib.logging_helper as logging_helper
from components.diffcore import Conv1d, Linear, TransformerStack, check_finite, mse_loss, sinusoidal_encoding
from lib.class_helper import (
    ConfigurationError,
    DecoderConfig,
    DimensionError,
    FlowConfig,
    GradientCheckError,
    SamplerConfig,
    ValidationError,
)

mlog = logging_helper.Log("components.flowdec")

TIME_SCALE = 1000.0  # t in [0, 1] is scaled before the sinusoidal embedding
ENC_DIM_CONSTANT = 0.5 * math.log(2 * math.pi)

TOY_MEANS = [[2.0, 2.0], [-2.0, 2.0], [-2.0, -2.0], [2.0, -2.0]]
TOY_STD = 0.3


############################################
#### Flow ####
############################################


def _expand_time(t, x):
    """Turns a float, a scalar tensor or a per-item (B,) tensor into something broadcastable against x."""
    t = torch.as_tensor(t, dtype=x.dtype)
    if t.dim() == 0:
        return t
    return t.reshape(t.shape + (1,) * (x.dim() - t.dim()))


def _check_time(t):
    t = torch.as_tensor(t, dtype=torch.float64)
    if torch.any(t < 0) or torch.any(t > 1):
        raise ValidationError("t has to lie in [0, 1]")


def ot_flow(x0, x1, t, sigma_min):
    """phi_t = (1 - (1 - sigma_min) t) x0 + t x1."""
    if x0.shape != x1.shape:
        raise DimensionError(f"x0 {tuple(x0.shape)} and x1 {tuple(x1.shape)} differ")
    _check_time(t)
    t = _expand_time(t, x0)
    return (1.0 - (1.0 - sigma_min) * t) * x0 + t * x1


def ot_target_field(x0, x1, sigma_min):
    """u = x1 - (1 - sigma_min) x0, constant in t."""
    if x0.shape != x1.shape:
        raise DimensionError(f"x0 {tuple(x0.shape)} and x1 {tuple(x1.shape)} differ")
    return x1 - (1.0 - sigma_min) * x0


def schedule_time(u, cosine=True):
    """Maps u in [0, 1] to t: 1 - cos(u pi / 2) with the cosine schedule, u otherwise."""
    u = torch.as_tensor(u, dtype=torch.float64)
    return 1.0 - torch.cos(u * math.pi / 2.0) if cosine else u


def sample_timestep(generator, cosine=True, size=()):
    """Draws t with u ~ U(0, 1) from the given torch.Generator."""
    return schedule_time(torch.rand(size, generator=generator, dtype=torch.float64), cosine)


############################################
#### Networks ####
############################################


class NullCondition(nn.Module):
    """Learned condition row used in place of mu when the condition is dropped."""

    def __init__(self, n_feats):
        super().__init__()
        self.row = nn.Parameter(torch.zeros(n_feats))

    def forward(self, like):
        return self.row.expand(like.shape)


class TimeEmbedding(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.dim = dim
        self.hidden = Linear(dim, 4 * dim)
        self.activation = nn.SiLU()
        self.out = Linear(4 * dim, dim)

    def forward(self, t):
        features = sinusoidal_encoding(t.reshape(-1) * TIME_SCALE, self.dim)
        return self.out(self.activation(self.hidden(features)))


class ResidualBlock(nn.Module):
    """Two convolutions with SiLU, the time embedding added in between, and a residual connection."""

    def __init__(self, in_dim, out_dim, time_dim, kernel_size=3):
        super().__init__()
        self.conv_in = Conv1d(in_dim, out_dim, kernel_size)
        self.time = Linear(time_dim, out_dim)
        self.conv_out = Conv1d(out_dim, out_dim, kernel_size)
        self.activation = nn.SiLU()
        self.skip = Linear(in_dim, out_dim) if in_dim != out_dim else None

    def forward(self, x, t_emb):
        h = self.activation(self.conv_in(x))
        h = h + self.time(t_emb).unsqueeze(1)
        h = self.activation(self.conv_out(h))
        return h + (x if self.skip is None else self.skip(x))


class VectorFieldNet(nn.Module):
    """U-shaped vector field v(x_t | condition, t) over (B, T, n_feats) sequences.

    Level 0 works at full resolution with channels[0], level 1 at half resolution with channels[1] and a
    snake-beta attention block. The decoder upsamples by repetition, crops and concatenates the level 0 skip.
    """

    def __init__(self, cfg: DecoderConfig = None):
        super().__init__()
        cfg = cfg or DecoderConfig()
        self.cfg = cfg
        c0, c1 = cfg.channels
        self.time_embedding = TimeEmbedding(cfg.time_embedding_dim)
        self.down = ResidualBlock(2 * cfg.n_feats, c0, cfg.time_embedding_dim, cfg.kernel_size)
        self.downsample = Conv1d(c0, c0, cfg.kernel_size)
        self.mid = ResidualBlock(c0, c1, cfg.time_embedding_dim, cfg.kernel_size)
        self.mid_attention = TransformerStack(c1, cfg.heads, 1, activation="snake")
        self.up = ResidualBlock(c1 + c0, c0, cfg.time_embedding_dim, cfg.kernel_size)
        self.out = Linear(c0, cfg.n_feats)
        self.null_condition = NullCondition(cfg.n_feats)

    def null_like(self, mu):
        return self.null_condition(mu)

    def forward(self, x_t, condition, t):
        if x_t.shape != condition.shape:
            raise DimensionError(f"x_t {tuple(x_t.shape)} and condition {tuple(condition.shape)} differ")
        squeeze = x_t.dim() == 2
        if squeeze:
            x_t, condition = x_t.unsqueeze(0), condition.unsqueeze(0)
        batch, frames, _ = x_t.shape
        t = torch.as_tensor(t, dtype=x_t.dtype).reshape(-1).expand(batch)
        t_emb = self.time_embedding(t)

        skip = self.down(torch.cat([x_t, condition], dim=-1), t_emb)
        h = self.downsample(skip)[:, ::2]
        h = self.mid(h, t_emb)
        h = self.mid_attention(h)
        h = torch.repeat_interleave(h, 2, dim=1)[:, :frames]
        h = self.up(torch.cat([h, skip], dim=-1), t_emb)
        out = self.out(h)
        return out.squeeze(0) if squeeze else out


class ToyVectorField(nn.Module):
    """Per-row MLP vector field v(x | condition, t) for (B, dim) points."""

    def __init__(self, dim=2, cond_dim=4, hidden_dim=64, time_dim=16):
        super().__init__()
        self.time_dim = time_dim
        self.layers = nn.ModuleList(
            [Linear(dim + cond_dim + time_dim, hidden_dim), Linear(hidden_dim, hidden_dim), Linear(hidden_dim, hidden_dim)]
        )
        self.activation = nn.SiLU()
        self.out = Linear(hidden_dim, dim)
        self.null_condition = NullCondition(cond_dim)

    def null_like(self, condition):
        return self.null_condition(condition)

    def forward(self, x, condition, t):
        t = torch.as_tensor(t, dtype=x.dtype).reshape(-1).expand(x.shape[0])
        h = torch.cat([x, condition, sinusoidal_encoding(t * 4.0, self.time_dim)], dim=-1)
        for layer in self.layers:
            h = self.activation(layer(h))
        return self.out(h)


def toy_mixture(generator, samples_per_class):
    """Draws points of the four-component 2-D Gaussian mixture.

    Returns:
        tuple: (points (4n, 2), one-hot labels (4n, 4), class index (4n,))
    """
    means = torch.tensor(TOY_MEANS)
    classes = torch.arange(len(TOY_MEANS)).repeat_interleave(samples_per_class)
    points = means[classes] + TOY_STD * torch.randn(len(classes), 2, generator=generator)
    labels = torch.nn.functional.one_hot(classes, len(TOY_MEANS)).to(torch.float64)
    return points, labels, classes


############################################
#### Losses ####
############################################


def draw_prior(shape, generator, mu=None, prior="standard"):
    """x0 ~ N(0, I), or N(mu, I) with the 'mu_centered' prior."""
    x0 = torch.randn(shape, generator=generator, dtype=torch.float64)
    if prior == "mu_centered":
        if mu is None:
            raise ValidationError("the mu_centered prior needs mu")
        if tuple(mu.shape) != tuple(x0.shape):
            raise DimensionError(f"the mu_centered prior needs mu of shape {tuple(x0.shape)}, got {tuple(mu.shape)}")
        x0 = x0 + mu.detach()
    elif prior != "standard":
        raise ConfigurationError(f"Unknown prior '{prior}'")
    return x0


def cfm_loss(net, x1, mu, cfg: FlowConfig, generator, item_dims=2):
    """OT-CFM loss: mean squared error between u and net(phi_t, condition, t).

    The trailing item_dims dimensions of x1 and mu form one item (2 for (T, F) mel-spectrograms, 1 for toy points).
    Mel items need mu and x1 of the same shape; toy points only need one condition row per point.
    x0, t and the condition dropout are drawn per item from the generator.
    """
    size = tuple(x1.shape[: x1.dim() - item_dims])
    if tuple(mu.shape[: mu.dim() - item_dims]) != size or (item_dims > 1 and x1.shape != mu.shape):
        raise DimensionError(f"mu {tuple(mu.shape)} and x1 {tuple(x1.shape)} differ")
    x0 = draw_prior(x1.shape, generator, mu, cfg.prior)
    t = sample_timestep(generator, cfg.cosine_schedule, size)
    dropped = torch.rand(size, generator=generator, dtype=torch.float64) < cfg.cfg_drop_prob
    condition = torch.where(dropped.reshape(size + (1,) * item_dims), net.null_like(mu), mu)

    x_t = ot_flow(x0, x1, t, cfg.sigma_min)
    target = ot_target_field(x0, x1, cfg.sigma_min)
    return mse_loss(net(x_t, condition, t), target)


def encoder_nll_loss(mu, x1):
    """-sum_i log N(x_i; mu_i, I) over the frames: sum_i ||x_i - mu_i||^2 / 2 + (d / 2) log(2 pi).

    For (B, T, d) input the per-item sums are averaged over the batch.
    """
    if mu.shape != x1.shape:
        raise DimensionError(f"mu {tuple(mu.shape)} and x1 {tuple(x1.shape)} differ")
    frames = mu.shape[-2]
    dims = mu.shape[-1]
    quadratic = 0.5 * ((x1 - mu) ** 2).sum(dim=(-2, -1))
    loss = quadratic + frames * dims * ENC_DIM_CONSTANT
    return loss.mean() if mu.dim() == 3 else loss


def total_loss(cfm, enc, loss_c, loss_t, loss_p, cfg: FlowConfig):
    """cfm + enc + lambda_c L_c + lambda_t L_t + lambda_p L_p. Raises GradientCheckError on a non-finite component."""
    components = {"L_cfm": cfm, "L_enc": enc, "L_c": loss_c, "L_t": loss_t, "L_p": loss_p}
    for name, value in components.items():
        if not math.isfinite(float(value)):
            raise GradientCheckError(f"loss component {name} is not finite ({float(value)})")
    return cfm + enc + cfg.lambda_c * loss_c + cfg.lambda_t * loss_t + cfg.lambda_p * loss_p


############################################
#### Sampling ####
############################################


def euler_integrate(field, x0, steps):
    """Integrates dx/dt = field(x, t) from t = 0 to 1 on the uniform grid t_k = k / steps."""
    if steps < 1:
        raise ConfigurationError(f"steps has to be >= 1, got {steps}")
    epsilon = 1.0 / steps
    x = x0
    for k in range(steps):
        x = x + epsilon * field(x, k * epsilon)
    return x


def guided_field(net, mu, beta):
    """v = (1 + beta) v(x | mu) - beta v(x | null). With beta = 0 the null branch is never evaluated."""
    null = net.null_like(mu) if beta > 0 else None

    def field(x, t):
        conditional = net(x, mu, t)
        if beta == 0:
            return conditional
        return (1.0 + beta) * conditional - beta * net(x, null, t)

    return field


def euler_sample(net, mu, sc: SamplerConfig = None, prior="standard", x0=None, shape=None):
    """Generates x(1) with the CFG Euler solver, starting from x0 drawn with sc.seed (unless given).

    Args:
        net (nn.Module): VectorFieldNet or ToyVectorField
        mu (torch.Tensor): The condition
        sc (SamplerConfig): steps, beta and seed
        prior (str): 'standard' or 'mu_centered'
        x0 (torch.Tensor): A fixed start point (optional)
        shape (tuple): Shape of the drawn start point (default: the shape of mu)
    """
    sc = sc or SamplerConfig()
    if sc.steps < 1:
        raise ConfigurationError(f"steps has to be >= 1, got {sc.steps}")
    with torch.no_grad():
        mu = mu.detach()
        if x0 is None:
            x0 = draw_prior(shape or mu.shape, torch.Generator().manual_seed(sc.seed), mu, prior)
        x = euler_integrate(guided_field(net, mu, sc.beta), x0, sc.steps)
    return check_finite("sampled mel", x)


def trajectory_gap(net, mu, seeds, steps_a=10, steps_b=1000, beta=0.0, prior="standard", shape=None):
    """Compares few-step and many-step sampling from shared start points.

    Returns:
        tuple: (mean endpoint L2 distance, mean endpoint L2 norm of the steps_b runs)
    """
    distances = []
    norms = []
    for seed in seeds:
        x0 = draw_prior(shape or mu.shape, torch.Generator().manual_seed(int(seed)), mu.detach(), prior)
        end_a = euler_sample(net, mu, SamplerConfig(steps=steps_a, beta=beta, seed=seed), x0=x0)
        end_b = euler_sample(net, mu, SamplerConfig(steps=steps_b, beta=beta, seed=seed), x0=x0)
        distances.append(torch.linalg.norm(end_a - end_b, dim=-1).mean().item())
        norms.append(torch.linalg.norm(end_b, dim=-1).mean().item())
    return sum(distances) / len(distances), sum(norms) / len(norms)
