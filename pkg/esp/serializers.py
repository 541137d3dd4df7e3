from __future__ import annotations

import copy
import json
from typing import Any

from django.conf import settings
from rest_framework import serializers

from .choices import Activation, Domain, Method, PolicyRule, PredictorKind, TargetScaling
from .engine import EspConfig
from .environments import make_environment
from .evolution import EvolutionConfig
from .exceptions import ConfigError
from .models import ExperimentRun
from .predictors import ForestConfig, MlpConfig

CONFIG_SCHEMA_VERSION = 1

_EVOLUTION_DEFAULTS = {
    "population_size": 100,
    "elite_fraction": 0.10,
    "parent_fraction": 0.20,
    "mutation_rate": 0.10,
    "mutation_factor_mean": 1.0,
    "mutation_factor_std": 0.1,
    "tournament_size": 2,
}

_PREDICTOR_DEFAULTS = {
    "kind": PredictorKind.MLP,
    "hidden_sizes": [64, 64],
    "output_activation": Activation.TANH,
    "target_scaling": TargetScaling.BOUND,
    "epochs": 1000,
    "batch_size": 256,
    "learning_rate": 0.001,
    "n_estimators": 100,
    "bootstrap": True,
    "min_samples_leaf": 1,
    "max_depth": None,
    "feature_subsample": 1.0,
}

_COMMON = {
    "schema_version": CONFIG_SCHEMA_VERSION,
    "method": Method.ESP,
    "seed": 0,
    "run_count": 10,
    "output_dir": settings.ESP_OUTPUT_DIR,
    "gamma": 0.9,
    "max_pool_size": None,
    "fitness_contexts": None,
    "physics": {},
}

DOMAIN_PRESETS: dict[str, dict[str, Any]] = {
    Domain.FUNCTION: {
        **_COMMON,
        "domain": Domain.FUNCTION,
        "evolution": dict(_EVOLUTION_DEFAULTS),
        "prescriptor": {"hidden_sizes": [32]},
        "predictor": {
            **_PREDICTOR_DEFAULTS,
            "output_activation": Activation.LINEAR,
            "target_scaling": TargetScaling.STANDARDIZE,
            "epochs": 2000,
        },
        "generations_per_predictor": 20,
        "elites_evaluated": 1,
        "episodes_per_elite": 1,
        "initial_random_episodes": 10,
        "terminal_bonus": 0.0,
        "max_generations": None,
        "max_episodes": 300,
        "target_reward": None,
        "success_threshold": -0.5,
        "de_episodes_per_candidate": 1,
        "evaluation_episodes": 1000,
        "best_policy_rule": PolicyRule.POPULATION_TOP,
    },
    Domain.CARTPOLE: {
        **_COMMON,
        "domain": Domain.CARTPOLE,
        "evolution": {**_EVOLUTION_DEFAULTS, "population_size": 50},
        "prescriptor": {"hidden_sizes": [32]},
        "predictor": dict(_PREDICTOR_DEFAULTS),
        "generations_per_predictor": 5,
        "elites_evaluated": 5,
        "episodes_per_elite": 5,
        "initial_random_episodes": 25,
        "terminal_bonus": 2000.0,
        "max_generations": 160,
        "max_episodes": None,
        "target_reward": 200.0,
        "success_threshold": 195.0,
        "de_episodes_per_candidate": 5,
        "evaluation_episodes": 100,
        "best_policy_rule": PolicyRule.BEST_REAL,
    },
    Domain.FLAPPY: {
        **_COMMON,
        "domain": Domain.FLAPPY,
        "evolution": dict(_EVOLUTION_DEFAULTS),
        "prescriptor": {"hidden_sizes": [128]},
        "predictor": {
            **_PREDICTOR_DEFAULTS,
            "kind": PredictorKind.RANDOM_FOREST,
            "target_scaling": TargetScaling.NONE,
        },
        "generations_per_predictor": 1,
        "elites_evaluated": 10,
        "episodes_per_elite": 10,
        "initial_random_episodes": 100,
        "terminal_bonus": 0.0,
        "max_generations": None,
        "max_episodes": 20000,
        "target_reward": None,
        "success_threshold": None,
        "de_episodes_per_candidate": 10,
        "evaluation_episodes": 10,
        "best_policy_rule": PolicyRule.BEST_REAL,
        "max_pool_size": 20000,
        "fitness_contexts": 1000,
    },
}


class StrictSerializer(serializers.Serializer):
    """Rejects keys the schema does not declare."""

    def to_internal_value(self, data):
        if isinstance(data, dict):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError({key: ["Unknown field."] for key in unknown})
        return super().to_internal_value(data)


class EvolutionSerializer(StrictSerializer):
    population_size = serializers.IntegerField(min_value=1)
    elite_fraction = serializers.FloatField(min_value=0.0, max_value=1.0)
    parent_fraction = serializers.FloatField(min_value=0.0, max_value=1.0)
    mutation_rate = serializers.FloatField(min_value=0.0, max_value=1.0)
    mutation_factor_mean = serializers.FloatField()
    mutation_factor_std = serializers.FloatField(min_value=0.0)
    tournament_size = serializers.IntegerField(min_value=1)

    def validate(self, attrs):
        try:
            EvolutionConfig(**attrs)
        except ConfigError as exc:
            raise serializers.ValidationError(str(exc))
        return attrs


class PrescriptorSerializer(StrictSerializer):
    hidden_sizes = serializers.ListField(child=serializers.IntegerField(min_value=1), allow_empty=True)


class PredictorSerializer(StrictSerializer):
    kind = serializers.ChoiceField(choices=PredictorKind.choices)
    hidden_sizes = serializers.ListField(child=serializers.IntegerField(min_value=1), allow_empty=True)
    output_activation = serializers.ChoiceField(choices=[Activation.TANH, Activation.LINEAR])
    target_scaling = serializers.ChoiceField(choices=TargetScaling.choices)
    epochs = serializers.IntegerField(min_value=1)
    batch_size = serializers.IntegerField(min_value=1)
    learning_rate = serializers.FloatField(min_value=0.0)
    n_estimators = serializers.IntegerField(min_value=1)
    bootstrap = serializers.BooleanField()
    min_samples_leaf = serializers.IntegerField(min_value=1)
    max_depth = serializers.IntegerField(min_value=1, allow_null=True)
    feature_subsample = serializers.FloatField(min_value=0.0, max_value=1.0)

    def validate(self, attrs):
        if attrs["learning_rate"] <= 0:
            raise serializers.ValidationError({"learning_rate": ["Must be greater than 0."]})
        if attrs["feature_subsample"] <= 0:
            raise serializers.ValidationError({"feature_subsample": ["Must be greater than 0."]})
        return attrs


class ExperimentConfigSerializer(StrictSerializer):
    schema_version = serializers.ChoiceField(choices=[CONFIG_SCHEMA_VERSION])
    domain = serializers.ChoiceField(choices=Domain.choices)
    method = serializers.ChoiceField(choices=Method.choices)
    seed = serializers.IntegerField(min_value=0)
    run_count = serializers.IntegerField(min_value=1)
    output_dir = serializers.CharField()
    evolution = EvolutionSerializer()
    prescriptor = PrescriptorSerializer()
    predictor = PredictorSerializer()
    generations_per_predictor = serializers.IntegerField(min_value=1)
    elites_evaluated = serializers.IntegerField(min_value=1)
    episodes_per_elite = serializers.IntegerField(min_value=1)
    initial_random_episodes = serializers.IntegerField(min_value=0)
    gamma = serializers.FloatField(min_value=0.0, max_value=1.0)
    terminal_bonus = serializers.FloatField(min_value=0.0)
    max_generations = serializers.IntegerField(
        min_value=1,
        allow_null=True,
        help_text=(
            "Bred generations. ESP stops after breeding this many; direct evolution also scores "
            "generation 0, so it evaluates max_generations + 1 populations."
        ),
    )
    max_episodes = serializers.IntegerField(min_value=1, allow_null=True)
    target_reward = serializers.FloatField(allow_null=True)
    success_threshold = serializers.FloatField(allow_null=True)
    de_episodes_per_candidate = serializers.IntegerField(min_value=1)
    evaluation_episodes = serializers.IntegerField(min_value=1)
    best_policy_rule = serializers.ChoiceField(choices=PolicyRule.choices)
    max_pool_size = serializers.IntegerField(min_value=1, allow_null=True)
    fitness_contexts = serializers.IntegerField(min_value=1, allow_null=True)
    physics = serializers.DictField()

    def validate(self, attrs):
        if attrs["max_generations"] is None and attrs["max_episodes"] is None:
            raise serializers.ValidationError(
                "Set max_generations or max_episodes so every run terminates."
            )
        if attrs["elites_evaluated"] > attrs["evolution"]["population_size"]:
            raise serializers.ValidationError(
                {"elites_evaluated": ["Cannot exceed evolution.population_size."]}
            )
        if attrs["method"] == Method.ESP and attrs["initial_random_episodes"] < 1:
            raise serializers.ValidationError(
                {"initial_random_episodes": ["ESP needs at least one random episode to fit its first Predictor."]}
            )
        try:
            make_environment(attrs["domain"], attrs["physics"])
        except ConfigError as exc:
            raise serializers.ValidationError({"physics": [str(exc)]})
        except TypeError as exc:
            raise serializers.ValidationError({"physics": [f"Invalid physics value: {exc}"]})
        return attrs


def deep_merge(base: dict[str, Any], extra: dict[str, Any]) -> dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict) and key != "physics":
            merged[key] = deep_merge(merged[key], value)
        elif key == "physics" and isinstance(value, dict):
            merged[key] = {**merged.get(key, {}), **value}
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def resolve_config(raw: Any, overrides: dict[str, Any] | None = None) -> dict[str, Any]:
    """Preset + user document + CLI overrides, validated; raises DRF ValidationError."""
    if not isinstance(raw, dict):
        raise serializers.ValidationError("The config must be a JSON object.")
    domain = raw.get("domain")
    if domain not in DOMAIN_PRESETS:
        raise serializers.ValidationError(
            {"domain": [f"Must be one of: {', '.join(DOMAIN_PRESETS)}."]}
        )
    merged = deep_merge(DOMAIN_PRESETS[domain], raw)
    if overrides:
        merged = deep_merge(merged, overrides)
    serializer = ExperimentConfigSerializer(data=merged)
    serializer.is_valid(raise_exception=True)
    # plain JSON types, stable for archiving
    return json.loads(json.dumps(serializer.validated_data))


def esp_config_from(resolved: dict[str, Any], seed: int | None = None) -> EspConfig:
    evo = resolved["evolution"]
    pred = resolved["predictor"]
    if pred["kind"] == PredictorKind.MLP:
        predictor = MlpConfig(
            hidden_sizes=tuple(pred["hidden_sizes"]),
            output_activation=pred["output_activation"],
            epochs=pred["epochs"],
            batch_size=pred["batch_size"],
            learning_rate=pred["learning_rate"],
            target_scaling=pred["target_scaling"],
        )
    else:
        predictor = ForestConfig(
            n_estimators=pred["n_estimators"],
            bootstrap=pred["bootstrap"],
            min_samples_leaf=pred["min_samples_leaf"],
            max_depth=pred["max_depth"],
            feature_subsample=pred["feature_subsample"],
            target_scaling=pred["target_scaling"],
        )
    return EspConfig(
        domain=resolved["domain"],
        evolution=EvolutionConfig(**evo),
        prescriptor_hidden=tuple(resolved["prescriptor"]["hidden_sizes"]),
        predictor_kind=pred["kind"],
        predictor=predictor,
        generations_per_predictor=resolved["generations_per_predictor"],
        elites_evaluated=resolved["elites_evaluated"],
        episodes_per_elite=resolved["episodes_per_elite"],
        initial_random_episodes=resolved["initial_random_episodes"],
        gamma=resolved["gamma"],
        terminal_bonus=resolved["terminal_bonus"],
        max_generations=resolved["max_generations"],
        max_episodes=resolved["max_episodes"],
        target_reward=resolved["target_reward"],
        success_threshold=resolved["success_threshold"],
        de_episodes_per_candidate=resolved["de_episodes_per_candidate"],
        evaluation_episodes=resolved["evaluation_episodes"],
        best_policy_rule=resolved["best_policy_rule"],
        max_pool_size=resolved["max_pool_size"],
        fitness_contexts=resolved["fitness_contexts"],
        physics=dict(resolved["physics"]),
        seed=resolved["seed"] if seed is None else seed,
        method=resolved["method"],
    )


class ExperimentRunSerializer(serializers.ModelSerializer):
    class Meta:
        model = ExperimentRun
        fields = "__all__"
        read_only_fields = ("created_at", "updated_at")


class CurveQuerySerializer(serializers.Serializer):
    domain = serializers.ChoiceField(choices=Domain.choices)
    method = serializers.ChoiceField(choices=Method.choices)
    metric = serializers.ChoiceField(
        choices=["true_performance", "regret_moving", "regret_cumulative"], default="true_performance"
    )
