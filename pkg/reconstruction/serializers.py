from rest_framework import serializers

from .denoiser import DenoiserMode, KernelParams, WindowProfile
from .exceptions import ConfigError
from .experiments import ExperimentConfig, SweepGrid
from .forward import ForwardKind
from .models import ExperimentRun
from .solver import Algorithm, CGConfig, InitRule, SolverConfig
from .spectral import PowerConfig

TASK_CHOICES = [kind.value for kind in ForwardKind] + ['inpaint', 'deblur', 'sr']


class StrictSerializer(serializers.Serializer):
    """Rejects keys it does not declare, so typos in a config file fail loudly."""

    def to_internal_value(self, data):
        if isinstance(data, dict):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError({key: ['Unknown field.'] for key in unknown})
        return super().to_internal_value(data)


class ImageSerializer(StrictSerializer):
    path = serializers.CharField(required=False, allow_null=True, default=None)
    width = serializers.IntegerField(min_value=1, default=32)
    height = serializers.IntegerField(min_value=1, default=32)
    max_size = serializers.IntegerField(min_value=1, required=False, allow_null=True, default=None)


class ForwardSerializer(StrictSerializer):
    mu = serializers.FloatField(default=0.3)
    mask_seed = serializers.IntegerField(min_value=0, required=False, allow_null=True, default=None)
    mask_path = serializers.CharField(required=False, allow_null=True, default=None)
    blur_kind = serializers.ChoiceField(choices=['gaussian', 'uniform'], default='gaussian')
    blur_size = serializers.IntegerField(min_value=1, required=False, allow_null=True, default=None)
    blur_std = serializers.FloatField(default=1.6)
    kernel_path = serializers.CharField(required=False, allow_null=True, default=None)
    stride = serializers.IntegerField(min_value=1, default=2)

    def validate_mu(self, value):
        if not 0.0 < value <= 1.0:
            raise serializers.ValidationError("mu must lie in (0, 1].")
        return value

    def validate_blur_std(self, value):
        if value <= 0:
            raise serializers.ValidationError("Blur standard deviation must be positive.")
        return value


class NoiseSerializer(StrictSerializer):
    sigma = serializers.FloatField(min_value=0, default=0.0)


class KernelSerializer(StrictSerializer):
    bandwidth = serializers.FloatField(default=0.3)
    window_radius = serializers.IntegerField(default=1)
    patch_radius = serializers.IntegerField(default=1)
    window_profile = serializers.ChoiceField(choices=[p.value for p in WindowProfile], default='hat')

    def validate(self, attrs):
        try:
            KernelParams(**attrs)
        except ConfigError as e:
            raise serializers.ValidationError(str(e))
        return attrs


class DenoiserSerializer(StrictSerializer):
    mode = serializers.ChoiceField(choices=[m.value for m in DenoiserMode], default='plain')
    guide = serializers.ChoiceField(choices=['observed', 'clean'], default='observed')
    sinkhorn_tol = serializers.FloatField(default=1e-10)
    sinkhorn_max_iter = serializers.IntegerField(min_value=1, default=10000)

    def validate_sinkhorn_tol(self, value):
        if value <= 0:
            raise serializers.ValidationError("Sinkhorn tolerance must be positive.")
        return value


class SolverSerializer(StrictSerializer):
    algorithm = serializers.ChoiceField(choices=[a.value for a in Algorithm], default='sc_pnp_ista')
    gamma = serializers.FloatField(default=1.0)
    rho = serializers.FloatField(default=1.0)
    max_iters = serializers.IntegerField(default=1000)
    stop_tol = serializers.FloatField(default=1e-9)
    cg_tol = serializers.FloatField(default=1e-10)
    cg_max_iters = serializers.IntegerField(default=500)
    init = serializers.ChoiceField(choices=[r.value for r in InitRule], default='guide')

    def validate(self, attrs):
        try:
            to_solver_config(attrs)
        except ConfigError as e:
            raise serializers.ValidationError(str(e))
        return attrs


class PowerSerializer(StrictSerializer):
    tol = serializers.FloatField(required=False)
    max_iters = serializers.IntegerField(required=False)
    seed = serializers.IntegerField(min_value=0, default=0)

    def validate(self, attrs):
        try:
            to_power_config(attrs)
        except ConfigError as e:
            raise serializers.ValidationError(str(e))
        return attrs


class SweepSerializer(StrictSerializer):
    mu = serializers.ListField(child=serializers.FloatField(), default=list)
    stride = serializers.ListField(child=serializers.IntegerField(min_value=1), default=list)
    gamma = serializers.ListField(child=serializers.FloatField(), default=list)
    rho = serializers.ListField(child=serializers.FloatField(), default=list)
    h = serializers.ListField(child=serializers.FloatField(), default=list)

    def validate_mu(self, value):
        if any(not 0.0 < mu <= 1.0 for mu in value):
            raise serializers.ValidationError("Every mu must lie in (0, 1].")
        return value

    def validate_gamma(self, value):
        if any(not 0.0 < gamma < 2.0 for gamma in value):
            raise serializers.ValidationError("Every gamma must lie in (0, 2).")
        return value

    def validate_rho(self, value):
        if any(rho <= 0 for rho in value):
            raise serializers.ValidationError("Every rho must be positive.")
        return value

    def validate_h(self, value):
        if any(h <= 0 for h in value):
            raise serializers.ValidationError("Every bandwidth must be positive.")
        return value


class OutputSerializer(StrictSerializer):
    dir = serializers.CharField(required=False, allow_null=True, default=None)
    measure_contraction = serializers.BooleanField(default=True)


class ExperimentConfigSerializer(StrictSerializer):
    """
    One experiment as a JSON document. ``save()`` returns an immutable ExperimentConfig.

    Sections left out fall back to their defaults; unknown keys are rejected at every level.
    """

    task = serializers.ChoiceField(choices=TASK_CHOICES, default='deblurring')
    image = ImageSerializer(required=False)
    forward = ForwardSerializer(required=False)
    noise = NoiseSerializer(required=False)
    kernel = KernelSerializer(required=False)
    denoiser = DenoiserSerializer(required=False)
    solver = SolverSerializer(required=False)
    power = PowerSerializer(required=False)
    sweep = SweepSerializer(required=False)
    output = OutputSerializer(required=False)
    seed = serializers.IntegerField(min_value=0, default=0)
    threads = serializers.IntegerField(min_value=1, required=False, allow_null=True, default=None)
    n_max = serializers.IntegerField(min_value=3, default=64)
    trials = serializers.IntegerField(min_value=1, default=100)
    dense_limit = serializers.IntegerField(min_value=1, required=False, allow_null=True, default=None)

    def _section(self, attrs, name):
        if name in attrs:
            return attrs[name]
        # run the nested defaults through the same validation as an explicit empty section
        section = self.fields[name]
        return section.run_validation({})

    def validate(self, attrs):
        try:
            self.to_config(attrs)
        except ConfigError as e:
            raise serializers.ValidationError(str(e))
        return attrs

    def to_config(self, attrs) -> ExperimentConfig:
        image = self._section(attrs, 'image')
        forward = self._section(attrs, 'forward')
        denoiser = self._section(attrs, 'denoiser')
        output = self._section(attrs, 'output')
        sweep = self._section(attrs, 'sweep')
        return ExperimentConfig(
            task=ForwardKind.parse(attrs['task']),
            image_path=image['path'],
            width=image['width'],
            height=image['height'],
            max_size=image['max_size'],
            mu=forward['mu'],
            mask_seed=forward['mask_seed'],
            mask_path=forward['mask_path'],
            blur_kind=forward['blur_kind'],
            blur_size=forward['blur_size'],
            blur_std=forward['blur_std'],
            kernel_path=forward['kernel_path'],
            stride=forward['stride'],
            sigma=self._section(attrs, 'noise')['sigma'],
            kernel=KernelParams(**self._section(attrs, 'kernel')),
            denoiser_mode=DenoiserMode(denoiser['mode']),
            guide=denoiser['guide'],
            sinkhorn_tol=denoiser['sinkhorn_tol'],
            sinkhorn_max_iter=denoiser['sinkhorn_max_iter'],
            solver=to_solver_config(self._section(attrs, 'solver')),
            power=to_power_config(self._section(attrs, 'power')),
            measure_contraction=output['measure_contraction'],
            sweep=SweepGrid(**{axis: tuple(values) for axis, values in sweep.items()}),
            seed=attrs['seed'],
            output_dir=output['dir'],
            threads=attrs['threads'],
            n_max=attrs['n_max'],
            trials=attrs['trials'],
            dense_limit=attrs['dense_limit'],
        )

    def create(self, validated_data):
        return self.to_config(validated_data)


def to_solver_config(attrs) -> SolverConfig:
    return SolverConfig(
        algorithm=Algorithm(attrs['algorithm']),
        gamma=attrs['gamma'],
        rho=attrs['rho'],
        max_iters=attrs['max_iters'],
        stop_tol=attrs['stop_tol'],
        cg=CGConfig(tol=attrs['cg_tol'], max_iters=attrs['cg_max_iters']),
        init=InitRule(attrs['init']),
    )


def to_power_config(attrs) -> PowerConfig:
    base = PowerConfig.from_settings(seed=attrs.get('seed', 0))
    return PowerConfig(
        tol=attrs.get('tol', base.tol),
        max_iters=attrs.get('max_iters', base.max_iters),
        seed=base.seed,
    )


def load_config(data) -> ExperimentConfig:
    """Validate a parsed JSON document; raises DRF ValidationError on bad input."""
    serializer = ExperimentConfigSerializer(data=data if data is not None else {})
    serializer.is_valid(raise_exception=True)
    return serializer.save()


class ExperimentRunListSerializer(serializers.ModelSerializer):
    class Meta:
        model = ExperimentRun
        fields = ['id', 'kind', 'status', 'task', 'algorithm', 'created_at']


class ExperimentRunSerializer(serializers.ModelSerializer):
    class Meta:
        model = ExperimentRun
        fields = '__all__'
