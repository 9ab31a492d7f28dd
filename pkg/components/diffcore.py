# hierflow
# This module provides the differentiable building blocks every trainable component of hierflow is made of.
#
# This module is capable of:
# [X] Time-major layers: linear, (masked) 1-D convolution, stride-2 transposed convolution, self-attention blocks
# [X] Snake-beta activation with learnable log-scale alpha and beta
# [X] Losses: cross entropy against target distributions, MAE, MSE
# [X] AdamW with per-step exponential learning rate decay
# [X] Central finite-difference gradient verification
# [X] Parameter checkpoints in the hierflow binary container
#
# All layers run in double precision on the CPU. Sequences are (T, D) or (B, T, D) tensors.

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

import lib.logging_helper as logging_helper
from lib.class_helper import ConfigurationError, DimensionError, GradientCheckError, OptimizerConfig, ValidationError
from lib.generic_helper import read_container, worker_cap, write_container

torch.set_default_dtype(torch.float64)

mlog = logging_helper.Log("components.diffcore")

GRADCHECK_STEP = 1e-5
GRADCHECK_THRESHOLD = 1e-4


def configure_threads():
    """Caps torch intra-op parallelism to the hierflow worker cap."""
    threads = worker_cap()
    torch.set_num_threads(threads)
    mlog.debug(f"torch uses {threads} thread(s)")
    return threads


def check_finite(name, tensor):
    """Raises a ValidationError if the tensor holds NaN or Inf."""
    if not torch.isfinite(tensor).all():
        raise ValidationError(f"{name} contains non-finite values")
    return tensor


def _uniform_(tensor, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        tensor.uniform_(-bound, bound)
    return tensor


############################################
#### Layers ####
############################################


class Linear(nn.Module):
    """Frame-wise affine map out[t] = x[t] @ W + b with W of shape (Din, Dout)."""

    def __init__(self, in_dim, out_dim, bias=True):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = nn.Parameter(_uniform_(torch.empty(in_dim, out_dim), in_dim))
        self.bias = nn.Parameter(_uniform_(torch.empty(out_dim), in_dim)) if bias else None

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"Linear expects {self.in_dim} input features, got {x.shape[-1]}")
        check_finite("Linear input", x)
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


class Conv1d(nn.Module):
    """Stride-1 convolution over time with zero 'same' padding.

    With masked=True the center tap is structurally zeroed, so the output at frame t never reads input frame t.

    Args:
        in_dim (int): Input features
        out_dim (int): Output features
        kernel_size (int): Odd kernel width
        masked (bool): Zero the center tap
    """

    def __init__(self, in_dim, out_dim, kernel_size=3, masked=False):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ConfigurationError(f"Conv1d needs an odd kernel, got {kernel_size}")
        if masked and kernel_size < 3:
            raise ConfigurationError(f"A masked convolution needs kernel_size >= 3, got {kernel_size}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.kernel_size = kernel_size
        self.masked = masked
        fan_in = in_dim * kernel_size
        self.weight = nn.Parameter(_uniform_(torch.empty(out_dim, in_dim, kernel_size), fan_in))
        self.bias = nn.Parameter(_uniform_(torch.empty(out_dim), fan_in))
        mask = torch.ones(1, 1, kernel_size)
        if masked:
            mask[..., kernel_size // 2] = 0.0
        self.register_buffer("mask", mask)

    def forward(self, x):
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"Conv1d expects {self.in_dim} input features, got {x.shape[-1]}")
        check_finite("Conv1d input", x)
        out = F.conv1d(x.transpose(1, 2), self.weight * self.mask, self.bias, padding=self.kernel_size // 2)
        out = out.transpose(1, 2)
        return out.squeeze(0) if squeeze else out


class TransposedConv1d(nn.Module):
    """Upsamples a sequence by exactly 2 (kernel 4, stride 2, padding 1): T frames in, 2T frames out."""

    KERNEL = 4

    def __init__(self, in_dim, out_dim):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        fan_in = in_dim * self.KERNEL // 2
        self.weight = nn.Parameter(_uniform_(torch.empty(in_dim, out_dim, self.KERNEL), fan_in))
        self.bias = nn.Parameter(_uniform_(torch.empty(out_dim), fan_in))

    def forward(self, x):
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"TransposedConv1d expects {self.in_dim} input features, got {x.shape[-1]}")
        check_finite("TransposedConv1d input", x)
        out = F.conv_transpose1d(x.transpose(1, 2), self.weight, self.bias, stride=2, padding=1)
        out = out.transpose(1, 2)
        return out.squeeze(0) if squeeze else out


class SnakeBeta(nn.Module):
    """Snake-beta activation x + 1/(beta + 1e-9) * sin^2(alpha * x), alpha and beta per channel in log scale.

    Args:
        channels (int): Number of channels
        channel_dim (int): The dimension holding the channels (-1 for time-major input)
    """

    def __init__(self, channels, channel_dim=-1):
        super().__init__()
        self.channels = channels
        self.channel_dim = channel_dim
        self.log_alpha = nn.Parameter(torch.zeros(channels))
        self.log_beta = nn.Parameter(torch.zeros(channels))

    def _broadcast(self, values, x):
        shape = [1] * x.dim()
        shape[self.channel_dim] = self.channels
        return values.view(shape)

    def forward(self, x):
        alpha = self._broadcast(torch.exp(self.log_alpha), x)
        beta = self._broadcast(torch.exp(self.log_beta), x)
        return x + (1.0 / (beta + 1e-9)) * torch.sin(alpha * x) ** 2


class MultiHeadSelfAttention(nn.Module):
    """Full (non-causal) multi-head self-attention. The last attention matrix (B, H, T, T) is kept in last_attention."""

    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads != 0:
            raise ConfigurationError(f"dim {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = Linear(dim, 3 * dim)
        self.proj = Linear(dim, dim)
        self.last_attention = None

    def forward(self, x):
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        batch, frames, _ = x.shape
        q, k, v = self.qkv(x).split(self.dim, dim=-1)
        q = q.view(batch, frames, self.heads, self.head_dim).transpose(1, 2)
        k = k.view(batch, frames, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(batch, frames, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        attention = torch.softmax(scores, dim=-1)
        self.last_attention = attention.detach()
        out = (attention @ v).transpose(1, 2).reshape(batch, frames, self.dim)
        out = self.proj(out)
        return out.squeeze(0) if squeeze else out


class AttentionBlock(nn.Module):
    """Pre-norm Transformer layer: x + MHSA(LN(x)), then x + FF(LN(x)). No positional encoding inside.

    Args:
        dim (int): Model width
        heads (int): Attention heads (has to divide dim)
        activation (str): 'silu' or 'snake' for the feed-forward sublayer
        ff_mult (int): Width multiplier of the feed-forward sublayer
    """

    def __init__(self, dim, heads, activation="silu", ff_mult=2):
        super().__init__()
        self.norm_attention = nn.LayerNorm(dim)
        self.attention = MultiHeadSelfAttention(dim, heads)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff_in = Linear(dim, ff_mult * dim)
        if activation == "silu":
            self.activation = nn.SiLU()
        elif activation == "snake":
            self.activation = SnakeBeta(ff_mult * dim)
        else:
            raise ConfigurationError(f"Unknown activation '{activation}'")
        self.ff_out = Linear(ff_mult * dim, dim)

    def forward(self, x):
        x = x + self.attention(self.norm_attention(x))
        x = x + self.ff_out(self.activation(self.ff_in(self.norm_ff(x))))
        return x


def sinusoidal_encoding(positions, dim):
    """Sinusoidal features of the given positions (1-D tensor), shape (len(positions), dim)."""
    half = dim // 2
    scale = math.log(10000.0) / max(half - 1, 1)
    frequencies = torch.exp(-scale * torch.arange(half, dtype=torch.float64))
    angles = positions.to(torch.float64).unsqueeze(-1) * frequencies
    encoding = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if dim % 2:
        encoding = F.pad(encoding, (0, 1))
    return encoding


class TransformerStack(nn.Module):
    """Sinusoidal positional encoding added once at the input, followed by `layers` attention blocks."""

    def __init__(self, dim, heads, layers, activation="silu"):
        super().__init__()
        self.dim = dim
        self.blocks = nn.ModuleList([AttentionBlock(dim, heads, activation=activation) for _ in range(layers)])

    def forward(self, x):
        check_finite("TransformerStack input", x)
        frames = x.shape[-2]
        x = x + sinusoidal_encoding(torch.arange(frames), self.dim)
        for block in self.blocks:
            x = block(x)
        return x


############################################
#### Losses ####
############################################


def cross_entropy(logits, target_dist):
    """Mean over frames of -sum_k target[k] * log softmax(logits)[k].

    Args:
        logits (torch.Tensor): T x K logits
        target_dist (torch.Tensor): T x K target distributions (one-hot or uniform rows)

    Returns:
        torch.Tensor: The scalar loss
    """
    if logits.shape != target_dist.shape:
        raise DimensionError(f"logits {tuple(logits.shape)} and targets {tuple(target_dist.shape)} differ")
    row_sums = target_dist.sum(dim=-1)
    if torch.any(torch.abs(row_sums - 1.0) > 1e-6):
        raise ValidationError("every target row has to sum to 1")
    return -(target_dist * torch.log_softmax(logits, dim=-1)).sum(dim=-1).mean()


def mae_loss(pred, target):
    """Mean absolute error. The subgradient at exact ties is 0."""
    if pred.shape != target.shape:
        raise DimensionError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    return torch.abs(pred - target).mean()


def mse_loss(pred, target):
    if pred.shape != target.shape:
        raise DimensionError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    return ((pred - target) ** 2).mean()


############################################
#### Optimizer ####
############################################


class AdamW:
    """AdamW with decoupled weight decay whose learning rate is multiplied by lr_decay after every step.

    Args:
        named_parameters (iterable): (name, nn.Parameter) pairs, e.g. module.named_parameters()
        cfg (OptimizerConfig): The optimizer settings
    """

    def __init__(self, named_parameters, cfg: OptimizerConfig = None):
        cfg = cfg or OptimizerConfig()
        self.cfg = cfg
        self.named = [(name, param) for name, param in named_parameters if param.requires_grad]
        self.optimizer = torch.optim.AdamW(
            [param for _, param in self.named],
            lr=cfg.lr,
            betas=(cfg.beta1, cfg.beta2),
            eps=cfg.eps,
            weight_decay=cfg.weight_decay,
        )
        self.step_count = 0
        self.zero_grad()

    @property
    def lr(self):
        return self.optimizer.param_groups[0]["lr"]

    @lr.setter
    def lr(self, value):
        for group in self.optimizer.param_groups:
            group["lr"] = value

    def zero_grad(self):
        for _, param in self.named:
            if param.grad is None:
                param.grad = torch.zeros_like(param)
            else:
                param.grad.zero_()

    def step(self):
        """Applies one update, decays the learning rate and zeroes the gradients."""
        self.optimizer.step()
        self.step_count += 1
        self.lr = self.lr * self.cfg.lr_decay
        self.zero_grad()

    def state_entries(self):
        """Returns the moments, step counter and learning rate as container entries."""
        entries = {"opt/step_count": np.array([self.step_count]), "opt/lr": np.array([self.lr])}
        for name, param in self.named:
            state = self.optimizer.state.get(param)
            if not state:
                continue
            entries[f"opt/{name}/exp_avg"] = state["exp_avg"].detach().numpy()
            entries[f"opt/{name}/exp_avg_sq"] = state["exp_avg_sq"].detach().numpy()
            entries[f"opt/{name}/step"] = np.array([float(state["step"])])
        return entries

    def load_state_entries(self, entries):
        self.step_count = int(entries["opt/step_count"][0])
        self.lr = float(entries["opt/lr"][0])
        for name, param in self.named:
            key = f"opt/{name}/exp_avg"
            if key not in entries:
                continue
            if entries[key].shape != tuple(param.shape):
                raise DimensionError(f"optimizer moment of {name} has shape {entries[key].shape}")
            self.optimizer.state[param] = {
                "step": torch.tensor(float(entries[f"opt/{name}/step"][0])),
                "exp_avg": torch.from_numpy(entries[key].copy()),
                "exp_avg_sq": torch.from_numpy(entries[f"opt/{name}/exp_avg_sq"].copy()),
            }


############################################
#### Gradient verification ####
############################################


def relative_errors(fn, tensors, h=GRADCHECK_STEP, seed=0, fault=None):
    """Compares autograd gradients with central finite differences.

    A non-scalar output is reduced with a fixed random projection. The error of one tensor is
    max|a - n| / max(max|a|, max|n|, 1e-8).

    Args:
        fn (callable): Computes the output from the current values of `tensors`
        tensors (dict): Name to leaf tensor (inputs and parameters)
        h (float): Finite-difference step
        seed (int): Seed of the projection
        fault (str): Name of a tensor whose analytic gradient is doubled (test hook)

    Returns:
        dict: Name to relative error
    """
    names = list(tensors)
    leaves = [tensors[name] for name in names]
    for leaf in leaves:
        leaf.requires_grad_(True)

    with torch.no_grad():
        sample_out = fn()
    generator = torch.Generator().manual_seed(seed)
    projection = torch.randn(sample_out.shape, generator=generator, dtype=torch.float64) if sample_out.dim() > 0 else None

    def objective():
        out = fn()
        return out if projection is None else (out * projection).sum()

    grads = torch.autograd.grad(objective(), leaves, allow_unused=True)
    analytic = {}
    for name, leaf, grad in zip(names, leaves, grads):
        grad = torch.zeros_like(leaf) if grad is None else grad.detach().clone()
        if name == fault:
            grad = grad * 2.0
        if not torch.isfinite(grad).all():
            raise GradientCheckError(f"analytic gradient of {name} is not finite")
        analytic[name] = grad

    errors = {}
    with torch.no_grad():
        for name, leaf in zip(names, leaves):
            flat = leaf.data.view(-1)
            numeric = torch.zeros_like(flat)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + h
                plus = objective().item()
                flat[i] = original - h
                minus = objective().item()
                flat[i] = original
                numeric[i] = (plus - minus) / (2.0 * h)
            a = analytic[name].reshape(-1)
            scale = max(a.abs().max().item() if a.numel() else 0.0, numeric.abs().max().item() if a.numel() else 0.0, 1e-8)
            errors[name] = (a - numeric).abs().max().item() / scale if a.numel() else 0.0
    return errors


def gradient_check(fn, tensors, h=GRADCHECK_STEP, seed=0, fault=None):
    """Returns the maximum relative error of relative_errors() over every checked tensor."""
    errors = relative_errors(fn, tensors, h=h, seed=seed, fault=fault)
    return max(errors.values()) if errors else 0.0


def module_tensors(module, **inputs):
    """Collects the inputs and every named parameter of a module into one dict for gradient checks."""
    tensors = {f"input/{name}": value for name, value in inputs.items()}
    tensors.update({f"param/{name}": param for name, param in module.named_parameters()})
    return tensors


############################################
#### Checkpoints ####
############################################


def save_checkpoint(path, module, optimizer=None, step=0, extra=None):
    """Writes the parameters (and the optimizer state) of a module to a binary container.

    Args:
        path (str): The target file
        module (nn.Module): The model
        optimizer (AdamW): The optimizer (optional)
        step (int): The training step the checkpoint belongs to
        extra (dict): Additional named arrays
    """
    entries = {"meta/step": np.array([step])}
    for name, param in module.named_parameters():
        entries[f"param/{name}"] = param.detach().numpy()
    if optimizer is not None:
        entries.update(optimizer.state_entries())
    if extra:
        entries.update(extra)
    write_container(path, entries)
    mlog.debug(f"Saved checkpoint of step {step} to {path}")


def load_checkpoint(path, module, optimizer=None):
    """Restores the parameters (and the optimizer state) written by save_checkpoint().

    Returns:
        tuple: (step, entries) with all container entries
    """
    entries = read_container(path)
    with torch.no_grad():
        for name, param in module.named_parameters():
            key = f"param/{name}"
            if key not in entries:
                raise ValidationError(f"checkpoint {path} has no parameter {name}")
            if entries[key].shape != tuple(param.shape):
                raise DimensionError(f"parameter {name} has shape {entries[key].shape} in {path}, expected {tuple(param.shape)}")
            param.copy_(torch.from_numpy(entries[key]))
    if optimizer is not None and "opt/step_count" in entries:
        optimizer.load_state_entries(entries)
    step = int(entries["meta/step"][0])
    mlog.debug(f"Loaded checkpoint of step {step} from {path}")
    return step, entries
