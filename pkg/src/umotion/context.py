"""Residual context detach/restore and the intra (spatial) context generator."""

from __future__ import annotations

from . import autodiff as ad
from .nn import Conv, ConvStack, relu
from .sparse import SparseTensor, concat_channels, sparse_deconv


def _check_coords(f: SparseTensor, ctx):
    for c in ctx:
        if not c.cs.same(f.cs):
            raise ValueError("context tensors must share the coordinates of the coded tensor")


class DetachRestorePair:
    """``r = f - phi_enc(f | ctx)`` and ``f_hat = r_hat + phi_dec(r_hat | ctx)``.

    Each phi is two 3^3 convolutions with a ReLU between them.
    """

    def __init__(self, store, name, channels, ctx_channels):
        self.channels = channels
        self.ctx_channels = ctx_channels
        self.enc = ConvStack(store, f"{name}.enc", [channels + ctx_channels, channels, channels])
        self.dec = ConvStack(store, f"{name}.dec", [channels + ctx_channels, channels, channels])

    def phi_enc(self, f, ctx):
        return self.enc(concat_channels(f, *ctx))

    def phi_dec(self, r_hat, ctx):
        return self.dec(concat_channels(r_hat, *ctx))


def detach(f: SparseTensor, ctx, pair: DetachRestorePair) -> SparseTensor:
    ctx = list(ctx)
    _check_coords(f, ctx)
    return f.with_feats(ad.sub(f.feats, pair.phi_enc(f, ctx).feats))


def restore(r_hat: SparseTensor, ctx, pair: DetachRestorePair) -> SparseTensor:
    ctx = list(ctx)
    _check_coords(r_hat, ctx)
    return r_hat.with_feats(ad.add(r_hat.feats, pair.phi_dec(r_hat, ctx).feats))


class TwoStage:
    """Temporal pair (inter context) followed by the spatial pair (intra context)."""

    def __init__(self, store, name, channels):
        self.temporal = DetachRestorePair(store, f"{name}.t", channels, channels)
        self.spatial = DetachRestorePair(store, f"{name}.s", channels, channels)


def two_stage_latent_detach(f, f_inter, f_intra, ts: TwoStage) -> SparseTensor:
    return detach(detach(f, [f_inter], ts.temporal), [f_intra], ts.spatial)


def two_stage_latent_restore(r_hat, f_inter, f_intra, ts: TwoStage) -> SparseTensor:
    return restore(restore(r_hat, [f_intra], ts.spatial), [f_inter], ts.temporal)


class IntraContext:
    """Upsample the decoded lower-scale latent and refine it with a 3^3 convolution.

    ``generative=True`` emits all eight children of every parent (geometry);
    otherwise the deconvolution is targeted at the known coordinates.
    """

    def __init__(self, store, name, channels, generative=False):
        self.generative = generative
        self.up = Conv(store, f"{name}.up", channels, channels, 2, stride=2, transposed=True)
        self.refine = Conv(store, f"{name}.ref", channels, channels, 3)

    def __call__(self, f_lower: SparseTensor, target=None) -> SparseTensor:
        if self.generative:
            up = sparse_deconv(f_lower, self.up.weights(), target=None, stride=2)
        else:
            if target is None:
                raise ValueError("attribute intra context needs target coordinates")
            orphans = target.parent_index(f_lower.cs) < 0
            if orphans.any():
                raise KeyError("intra context target has coordinates without a decoded parent")
            up = self.up(f_lower, out=target)
        return self.refine(relu(up))


def intra_context(f_lower, target, module: IntraContext) -> SparseTensor:
    return module(f_lower, target)
