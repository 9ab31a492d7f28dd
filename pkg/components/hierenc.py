# hierflow
# This module provides the hierarchical visual encoder that turns the oracle visual features of a clip into the
# decoder conditioning mu. Content, timbre and prosody are modeled one after the other.
#
# This module is capable of:
# [X] Learnable softmax-weighted summation of the lip encoder layers and x2 upsampling to the mel frame rate
# [X] Content stage: unit predictors CP / CP_m (masked), label smoothed cross entropy, unit embedding
# [X] Timbre stage: fusion with the face identity, temporal-mean timbre predictor TP, linear timbre embedding
# [X] Prosody stage: fusion with the expression features, pitch/energy predictors PP / PP_m, conv embeddings
# [X] Transformer mappers content->timbre and timbre->prosody, output stack and projection to 80 channels
# [X] Teacher forcing (train mode embeds the targets, infer mode the predictions)
# [X] The ablation flags hier, timbre_stage, prosody_stage, face_id, expr, weighted_sum, masked_pred

import numpy as np
import torch
from torch import nn

import lib.logging_helper as logging_helper
from components.diffcore import Conv1d, Linear, TransformerStack, TransposedConv1d, check_finite, cross_entropy, mae_loss
from lib.class_helper import N_MELS, DimensionError, EncoderConfig, EncoderLosses, SyntheticSample, ValidationError, VisualEncoding

mlog = logging_helper.Log("components.hierenc")

MODES = ["train", "infer"]


def _tensor(array):
    return torch.as_tensor(np.asarray(array, dtype=np.float64))


class ConvPredictor(nn.Module):
    """Attribute predictor: `blocks` convolution layers with SiLU, followed by a linear output layer.

    In masked mode the first convolution has its center tap zeroed and every later layer is point-wise, so the
    prediction at frame t never depends on input frame t.
    """

    def __init__(self, in_dim, hidden_dim, out_dim, blocks=2, kernel_size=3, masked=False):
        super().__init__()
        self.masked = masked
        layers = [Conv1d(in_dim, hidden_dim, kernel_size, masked=masked)]
        for _ in range(blocks - 1):
            layers.append(Conv1d(hidden_dim, hidden_dim, 1 if masked else kernel_size))
        self.convs = nn.ModuleList(layers)
        self.activation = nn.SiLU()
        self.out = Linear(hidden_dim, out_dim)

    def forward(self, h):
        for conv in self.convs:
            h = self.activation(conv(h))
        return self.out(h)


class FusionBlock(nn.Module):
    """Concatenates a hidden sequence with a second stream (a vector is broadcast over time) and projects back
    to the hidden width with two convolution blocks."""

    def __init__(self, dim, other_dim, kernel_size=3):
        super().__init__()
        self.dim = dim
        self.other_dim = other_dim
        self.conv_in = Conv1d(dim + other_dim, dim, kernel_size)
        self.activation = nn.SiLU()
        self.conv_out = Conv1d(dim, dim, kernel_size)

    def forward(self, a, b):
        if b.dim() == 1:
            b = b.unsqueeze(0).expand(a.shape[0], -1)
        if b.shape[0] != a.shape[0]:
            raise DimensionError(f"fusion streams have {a.shape[0]} and {b.shape[0]} frames")
        return self.conv_out(self.activation(self.conv_in(torch.cat([a, b], dim=-1))))


class HierarchicalEncoder(nn.Module):
    """The hierarchical visual encoder.

    Args:
        cfg (EncoderConfig): Sizes and ablation flags
        energy_mean (float): Corpus mean of the energy target
        energy_std (float): Corpus standard deviation of the energy target
    """

    def __init__(self, cfg: EncoderConfig = None, energy_mean=0.0, energy_std=1.0):
        super().__init__()
        cfg = cfg or EncoderConfig()
        self.cfg = cfg
        self.energy_mean = float(energy_mean)
        self.energy_std = float(energy_std)
        D = cfg.hidden_dim
        blocks, kernel = cfg.predictor_blocks, cfg.kernel_size

        self.layer_weights = nn.Parameter(torch.zeros(cfg.lip_layers))
        self.upsample = TransposedConv1d(cfg.lip_dim, D)

        self.content_predictor = ConvPredictor(D, D, cfg.n_units, blocks, kernel)
        self.content_predictor_masked = ConvPredictor(D, D, cfg.n_units, blocks, kernel, masked=True)
        self.unit_embedding = Linear(cfg.n_units, D, bias=False)
        self.c2t = TransformerStack(D, cfg.heads, cfg.mapper_layers)

        self.timbre_fusion = FusionBlock(D, cfg.face_dim, kernel)
        self.timbre_predictor = ConvPredictor(D, D, cfg.timbre_dim, blocks, kernel)
        self.timbre_embedding = Linear(cfg.timbre_dim, D)
        self.t2p = TransformerStack(D, cfg.heads, cfg.mapper_layers)

        self.prosody_fusion = FusionBlock(D, cfg.expr_dim, kernel)
        self.pitch_predictor = ConvPredictor(D, D, 1, blocks, kernel)
        self.pitch_predictor_masked = ConvPredictor(D, D, 1, blocks, kernel, masked=True)
        self.energy_predictor = ConvPredictor(D, D, 1, blocks, kernel)
        self.energy_predictor_masked = ConvPredictor(D, D, 1, blocks, kernel, masked=True)
        self.pitch_embedding = Conv1d(1, D, kernel)
        self.energy_embedding = Conv1d(1, D, kernel)

        self.output_stack = TransformerStack(D, cfg.heads, cfg.output_layers)
        self.projection = Linear(D, N_MELS)

    ############################################
    #### Stages ####
    ############################################

    def weighted_layer_sum(self, lip_layers):
        """Sum of the L lip layers weighted by softmax(layer_weights). Returns the last layer if weighted_sum is off."""
        if lip_layers.dim() != 3 or lip_layers.shape[0] != self.cfg.lip_layers:
            raise DimensionError(f"expected {self.cfg.lip_layers} lip layers, got shape {tuple(lip_layers.shape)}")
        if not self.cfg.weighted_sum:
            return lip_layers[-1]
        weights = torch.softmax(self.layer_weights, dim=0)
        return torch.einsum("l,ltd->td", weights, lip_layers)

    def layer_weight_table(self):
        """The softmax layer weights as an array (None if weighted_sum is off)."""
        if not self.cfg.weighted_sum:
            return None
        return torch.softmax(self.layer_weights.detach(), dim=0).numpy()

    def content_stage(self, h_l, target_units=None, mode="train"):
        """Predicts the units from h_l and embeds the target (train) or predicted (infer) units.

        Returns:
            tuple: (h_c, L_c, predicted unit ids)
        """
        cfg = self.cfg
        logits = self.content_predictor(h_l)
        predicted = torch.argmax(logits, dim=-1)
        loss = torch.zeros(())
        if mode == "train":
            if target_units is None:
                raise ValidationError("train mode needs the target units")
            if len(target_units) != h_l.shape[0]:
                raise ValidationError(f"{len(target_units)} unit targets for {h_l.shape[0]} mel frames")
            loss = self.content_loss(logits, target_units)
            if cfg.masked_pred:
                loss = loss + self.content_loss(self.content_predictor_masked(h_l), target_units)
            units = target_units
        else:
            units = predicted
        one_hot = torch.nn.functional.one_hot(units.long(), cfg.n_units).to(h_l.dtype)
        return h_l + self.unit_embedding(one_hot), loss, predicted

    def content_loss(self, logits, target_units):
        """alpha * CE(one-hot, logits) + (1 - alpha) * CE(uniform, logits)."""
        alpha = self.cfg.label_smoothing
        one_hot = torch.nn.functional.one_hot(target_units.long(), self.cfg.n_units).to(logits.dtype)
        uniform = torch.full_like(logits, 1.0 / self.cfg.n_units)
        return alpha * cross_entropy(logits, one_hot) + (1.0 - alpha) * cross_entropy(logits, uniform)

    def c2t_map(self, h):
        return self.c2t(h) if self.cfg.hier else h

    def t2p_map(self, h):
        return self.t2p(h) if self.cfg.hier else h

    def timbre_stage(self, face_id, h_c2t, target_timbre=None, mode="train"):
        """Predicts the timbre vector from Fusion(face_id, h_c2t) and embeds target (train) or prediction (infer).

        Returns:
            tuple: (timbre embedding broadcast over time, L_t, predicted timbre vector)
        """
        if self.cfg.face_id:
            face = face_id
        else:
            face = torch.zeros(self.cfg.face_dim)
        fused = self.timbre_fusion(h_c2t, face)
        predicted = self.timbre_predictor(fused).mean(dim=0)
        loss = torch.zeros(())
        if mode == "train":
            if target_timbre is None:
                raise ValidationError("train mode needs the target timbre vector")
            if target_timbre.shape != predicted.shape:
                raise DimensionError(f"timbre target has shape {tuple(target_timbre.shape)}, expected {tuple(predicted.shape)}")
            loss = mae_loss(predicted, target_timbre)
            timbre = target_timbre
        else:
            timbre = predicted
        embedding = self.timbre_embedding(timbre).unsqueeze(0).expand(h_c2t.shape[0], -1)
        return embedding, loss, predicted

    def prosody_stage(self, expr, h_c2p, target_pitch=None, target_energy=None, mode="train"):
        """Predicts pitch and energy from Fusion(expr, h_c2p) and embeds targets (train) or predictions (infer).

        Returns:
            tuple: (pitch + energy embedding, L_p, predicted pitch, predicted energy in target units)
        """
        cfg = self.cfg
        frames = h_c2p.shape[0]
        if cfg.expr:
            if expr.shape[0] != frames:
                raise DimensionError(f"expression features have {expr.shape[0]} frames, expected {frames}")
            stream = expr
        else:
            stream = torch.zeros(frames, cfg.expr_dim)
        fused = self.prosody_fusion(h_c2p, stream)
        pitch_pred = self.pitch_predictor(fused)[:, 0]
        energy_pred = self.energy_predictor(fused)[:, 0] * self.energy_std + self.energy_mean

        loss = torch.zeros(())
        if mode == "train":
            if target_pitch is None or target_energy is None:
                raise ValidationError("train mode needs the pitch and energy targets")
            if len(target_pitch) != frames or len(target_energy) != frames:
                raise ValidationError(f"prosody targets have {len(target_pitch)} frames, expected {frames}")
            loss = mae_loss(pitch_pred, target_pitch) + mae_loss(energy_pred, target_energy)
            if cfg.masked_pred:
                masked_pitch = self.pitch_predictor_masked(fused)[:, 0]
                masked_energy = self.energy_predictor_masked(fused)[:, 0] * self.energy_std + self.energy_mean
                loss = loss + mae_loss(masked_pitch, target_pitch) + mae_loss(masked_energy, target_energy)
            pitch, frame_energy = target_pitch, target_energy
        else:
            pitch, frame_energy = pitch_pred, energy_pred
        normalized_energy = (frame_energy - self.energy_mean) / self.energy_std
        embedding = self.pitch_embedding(pitch.unsqueeze(-1)) + self.energy_embedding(normalized_energy.unsqueeze(-1))
        return embedding, loss, pitch_pred, energy_pred

    def finalize_mu(self, h):
        """Output Transformer stack followed by the projection to 80 mel channels."""
        return self.projection(self.output_stack(h))

    ############################################
    #### Composition ####
    ############################################

    def forward(self, lip_layers, face_id, expr_feats, targets=None, mode="train"):
        """Runs content -> timbre -> prosody and returns (VisualEncoding, EncoderLosses).

        Args:
            lip_layers (torch.Tensor): L x T x D_l
            face_id (torch.Tensor): D_f
            expr_feats (torch.Tensor): T x D_e (video rate)
            targets (dict): 'units', 'timbre', 'pitch', 'energy' tensors at mel rate (train mode)
            mode (str): 'train' or 'infer'
        """
        if mode not in MODES:
            raise ValidationError(f"mode has to be one of {MODES}, got '{mode}'")
        if mode == "train" and targets is None:
            raise ValidationError("train mode needs attribute targets")
        cfg = self.cfg
        targets = targets if mode == "train" else {}

        h_l = self.upsample(self.weighted_layer_sum(lip_layers))
        check_finite("h_l", h_l)
        expr = torch.repeat_interleave(expr_feats, 2, dim=0)

        h_c, loss_c, unit_pred = self.content_stage(h_l, targets.get("units"), mode)

        h_t = h_c
        loss_t = torch.zeros(())
        timbre_pred = None
        if cfg.timbre_stage:
            h_c2t = self.c2t_map(h_c) if cfg.hier else h_l
            embedding, loss_t, timbre_pred = self.timbre_stage(face_id, h_c2t, targets.get("timbre"), mode)
            h_t = (h_c2t + embedding + h_c) if cfg.hier else (h_c + embedding)

        h_p = h_t
        loss_p = torch.zeros(())
        pitch_pred = energy_pred = None
        if cfg.prosody_stage:
            h_c2p = self.t2p_map(h_t) if cfg.hier else h_l
            embedding, loss_p, pitch_pred, energy_pred = self.prosody_stage(
                expr, h_c2p, targets.get("pitch"), targets.get("energy"), mode
            )
            h_p = (h_c2p + embedding + h_t) if cfg.hier else (h_t + embedding)

        mu = check_finite("mu", self.finalize_mu(h_p))
        encoding = VisualEncoding(mu, unit_pred, timbre_pred, pitch_pred, energy_pred)
        return encoding, EncoderLosses(loss_c, loss_t, loss_p)

    def encode(self, sample: SyntheticSample, mode="train", start=0, frames=None):
        """Encodes a sample (or the crop of `frames` video frames starting at `start`).

        Infer mode never reads sample.targets.
        """
        stop = sample.video_frames if frames is None else min(start + frames, sample.video_frames)
        lip_layers = _tensor(sample.lip_layers[:, start:stop])
        expr_feats = _tensor(sample.expr_feats[start:stop])
        targets = None
        if mode == "train":
            if sample.targets is None:
                raise ValidationError(f"{sample.sample_id} has no attribute targets (train mode)")
            cropped = sample.targets.cropped(2 * start, 2 * stop)
            targets = target_tensors(cropped)
        return self(lip_layers, _tensor(sample.face_id), expr_feats, targets=targets, mode=mode)


def target_tensors(targets):
    """AttributeTargets as the dict of tensors the encoder consumes."""
    return {
        "units": torch.as_tensor(targets.content_units, dtype=torch.long),
        "timbre": _tensor(targets.timbre_vec),
        "pitch": _tensor(targets.pitch),
        "energy": _tensor(targets.energy),
    }
