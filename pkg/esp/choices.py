from django.db import models


class Activation(models.TextChoices):
    TANH = "tanh", "Tanh"
    LINEAR = "linear", "Linear"
    ARGMAX = "argmax", "Argmax (one-hot)"


class Domain(models.TextChoices):
    FUNCTION = "function", "Function approximation"
    CARTPOLE = "cartpole", "Cart-pole"
    FLAPPY = "flappy", "Flappy side-scroller"


class Method(models.TextChoices):
    ESP = "esp", "Surrogate-assisted prescription"
    DE = "de", "Direct evolution"


class PredictorKind(models.TextChoices):
    MLP = "mlp", "Neural network"
    RANDOM_FOREST = "random_forest", "Random forest"


class TargetScaling(models.TextChoices):
    BOUND = "bound", "Divide by analytic bound"
    STANDARDIZE = "standardize", "Zero mean, unit variance"
    NONE = "none", "Identity"


class TerminalKind(models.TextChoices):
    NONE = "none", "Running"
    SUCCESS = "success", "Success"
    FAILURE = "failure", "Failure"
    TIMEOUT = "timeout", "Timeout"


class PolicyRule(models.TextChoices):
    POPULATION_TOP = "population_top", "Fittest member of the current population"
    BEST_REAL = "best_real", "Elite with the best real-world fitness"
