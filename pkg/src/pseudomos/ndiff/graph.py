"""Straight-line execution of a layer sequence with reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .layers import Conv2d, Layer, NdiffError, ShapeError, StateError, layer_from_spec


class Sequential:
    def __init__(self, layers: list[Layer]):
        self.layers = list(layers)
        self._ready = False

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def specs(self) -> list[dict]:
        return [layer.spec() for layer in self.layers]

    @classmethod
    def from_specs(cls, specs, dtype=np.float32, rng=None) -> "Sequential":
        return cls([layer_from_spec(s, dtype=dtype, rng=rng) for s in specs])

    def forward(self, x, train: bool = False, rng=None):
        """Run every layer in order; ``train`` enables dropout, batch statistics and caching."""
        for i, layer in enumerate(self.layers):
            try:
                layer.check_input(x)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
            x = layer.forward(x, train=train, rng=rng)
        self._ready = train
        return x

    def backward(self, grad, need_input_grad: bool = True):
        if not self._ready:
            raise StateError("backward needs a fresh training-mode forward pass")
        self._ready = False
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if i == 0 and not need_input_grad and isinstance(layer, Conv2d):
                return layer.backward(grad, need_input_grad=False)
            grad = layer.backward(grad)
        return grad

    def zero_grad(self):
        for layer in self.layers:
            layer.grads.clear()

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                yield f"{i}.{layer.kind}.{name}", layer, name, value

    def named_buffers(self):
        for i, layer in enumerate(self.layers):
            for name, value in layer.buffers.items():
                yield f"{i}.{layer.kind}.{name}", layer, name, value

    def parameters(self) -> dict[str, np.ndarray]:
        return {key: value for key, _, _, value in self.named_params()}

    def gradients(self) -> dict[str, np.ndarray]:
        out = {}
        for key, layer, name, value in self.named_params():
            out[key] = layer.grads.get(name, np.zeros_like(value))
        return out

    def set_parameters(self, values: dict[str, np.ndarray]):
        for key, layer, name, value in self.named_params():
            layer.params[name] = np.asarray(values[key], dtype=value.dtype).reshape(value.shape)

    def n_parameters(self) -> int:
        return sum(v.size for v in self.parameters().values())

    def state(self) -> dict[str, np.ndarray]:
        """Parameters plus buffers, copied."""
        out = {k: v.copy() for k, _, _, v in self.named_params()}
        out.update({k: v.copy() for k, _, _, v in self.named_buffers()})
        return out

    def load_state(self, state: dict[str, np.ndarray]):
        for key, layer, name, value in list(self.named_params()):
            layer.params[name] = np.array(state[key], dtype=value.dtype).reshape(value.shape)
        for key, layer, name, value in list(self.named_buffers()):
            if key not in state:
                raise NdiffError(f"state is missing buffer {key}")
            layer.buffers[name] = np.array(state[key], dtype=value.dtype).reshape(value.shape)
