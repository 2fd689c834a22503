"""Exception types shared across the package."""


class DomainError(ValueError):
    """A rate, step index or coordinate lies outside its valid domain."""


class PreconditionError(ValueError):
    """An input violates an operation's documented precondition."""


class UndefinedPosteriorError(ZeroDivisionError):
    """q(x_k | x_0) is zero, so the diffusion posterior does not exist."""

    def __init__(self, x0: int, xk: int, k: int):
        self.x0 = x0
        self.xk = xk
        self.k = k
        super().__init__(f"undefined posterior: q(x_{k}={xk} | x_0={x0}) = 0")


class StateSpaceTooLarge(RuntimeError):
    """Refusal to enumerate a latent path space above the configured bound."""


class EmptyRayError(ValueError):
    """A ray has no samples inside the feature-grid extents."""


class OutOfExtentError(ValueError):
    """A query point falls outside the neural feature grid."""


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, loss: float):
        self.iteration = iteration
        self.loss = loss
        super().__init__(f"loss became {loss} at iteration {iteration}")


class DenoiserFailure(RuntimeError):
    def __init__(self, step: int, cause: BaseException):
        self.step = step
        super().__init__(f"denoiser failed at diffusion step k={step}: {cause!r}")
