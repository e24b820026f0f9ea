class ShapeError(ValueError):
    """Parameter or input shape does not match the network description."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message if layer is None else f"layer {layer}: {message}")
        self.layer = layer


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/inf; ``step`` says where."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step
