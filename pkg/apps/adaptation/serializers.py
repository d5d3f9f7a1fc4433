from rest_framework import serializers

from .networks import GENERATOR_ARCHS, MIN_RESNET_SIDE, patchgan_receptive_field
from .segmentation import SegTrainConfig
from .translation import TranslationConfig

SCALES = ('desk', 'full')


class StrictSerializer(serializers.Serializer):
    """Сериализатор, отклоняющий неизвестные ключи"""

    def to_internal_value(self, data):
        if isinstance(data, dict):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError({key: ['Unknown key.'] for key in unknown})
        return super().to_internal_value(data)


def _vector(child, length, **kwargs):
    return serializers.ListField(child=child, min_length=length, max_length=length, required=False, **kwargs)


def _positive_float():
    return serializers.FloatField(min_value=0, required=False)


class ModalityMapSerializer(StrictSerializer):
    """Интенсивности одной модальности фантома"""
    background = serializers.FloatField()
    tissue = serializers.FloatField()
    tumor = serializers.FloatField()
    cochlea = serializers.FloatField()
    texture = serializers.FloatField(min_value=0)


class PhantomSerializer(StrictSerializer):
    grid = _vector(serializers.IntegerField(min_value=1), 3)
    spacing = _vector(serializers.FloatField(), 3)
    head_radii = _vector(serializers.FloatField(), 3)
    tumor_radius = _vector(serializers.FloatField(), 2)
    cochlea_radius = _vector(serializers.FloatField(), 2)
    source_map = ModalityMapSerializer(required=False)
    target_map = ModalityMapSerializer(required=False)
    noise_sigma = _positive_float()
    bias_amplitude = _positive_float()
    contrast_gap = _positive_float()
    intensity_bounds = _vector(serializers.FloatField(), 2)
    max_retries = serializers.IntegerField(min_value=1, required=False)

    def validate_spacing(self, value):
        if any(s <= 0 for s in value):
            raise serializers.ValidationError('Spacing must be positive.')
        return value


class DatasetSerializer(StrictSerializer):
    n_source = serializers.IntegerField(min_value=1, required=False)
    n_target_train = serializers.IntegerField(min_value=1, required=False)
    n_target_eval = serializers.IntegerField(min_value=1, required=False)


class TranslationSerializer(StrictSerializer):
    """Гиперпараметры CycleGAN; архитектура генератора задаётся на верхнем уровне"""
    lambda_adv = _positive_float()
    lambda_cyc = _positive_float()
    lambda_id = _positive_float()
    lr = _positive_float()
    epochs_const = serializers.IntegerField(min_value=0, required=False)
    epochs_decay = serializers.IntegerField(min_value=0, required=False)
    batch_size = serializers.IntegerField(min_value=1, required=False)
    pool_size = serializers.IntegerField(min_value=0, required=False)
    slice_size = serializers.IntegerField(min_value=MIN_RESNET_SIDE, required=False)
    base_width = serializers.IntegerField(min_value=1, required=False)
    n_res_blocks = serializers.IntegerField(min_value=0, required=False)
    unet_down = serializers.IntegerField(min_value=2, required=False)
    disc_width = serializers.IntegerField(min_value=1, required=False)
    disc_layers = serializers.IntegerField(min_value=1, required=False)
    betas = _vector(serializers.FloatField(min_value=0, max_value=1), 2)

    def validate_slice_size(self, value):
        if value % 4:
            raise serializers.ValidationError('Slice size must be a multiple of 4.')
        return value

    def validate(self, attrs):
        slice_size = attrs.get('slice_size', TranslationConfig.slice_size)
        field = patchgan_receptive_field(attrs.get('disc_layers', TranslationConfig.disc_layers))
        if field > slice_size:
            raise serializers.ValidationError(
                {'disc_layers': [f'Discriminator receptive field {field} exceeds the slice size {slice_size}.']}
            )
        return attrs


class SegmentationSerializer(StrictSerializer):
    epochs = serializers.IntegerField(min_value=0, required=False)
    lr = _positive_float()
    batch_size = serializers.IntegerField(min_value=1, required=False)
    patch_size = _vector(serializers.IntegerField(min_value=1), 3)
    base_width = serializers.IntegerField(min_value=1, required=False)
    depth = serializers.IntegerField(min_value=1, required=False)
    n_classes = serializers.IntegerField(min_value=2, required=False)
    flips = serializers.BooleanField(required=False)
    betas = _vector(serializers.FloatField(min_value=0, max_value=1), 2)

    def validate(self, attrs):
        depth = attrs.get('depth', SegTrainConfig.depth)
        patch = attrs.get('patch_size', SegTrainConfig.patch_size)
        factor = 2 ** depth
        if any(p % factor or p < 2 * factor for p in patch):
            raise serializers.ValidationError(
                {'patch_size': [f'Patch size must be divisible by 2^depth = {factor} and at least {2 * factor}.']}
            )
        return attrs


class SelfTrainingSerializer(StrictSerializer):
    n_iters = serializers.IntegerField(min_value=0, required=False)
    retrain_from_scratch = serializers.BooleanField(required=False)


class EvaluationSerializer(StrictSerializer):
    empty_penalty_mm = serializers.FloatField(min_value=0, allow_null=True, required=False)


class ExperimentConfigSerializer(StrictSerializer):
    """Сериализатор конфигурации эксперимента целиком"""
    scale = serializers.ChoiceField(choices=SCALES, required=False)
    seed = serializers.IntegerField(min_value=0, required=False)
    run_dir = serializers.CharField(allow_blank=True, required=False)
    data_root = serializers.CharField(allow_blank=True, required=False)
    generator = serializers.ChoiceField(choices=sorted(GENERATOR_ARCHS), required=False)
    compare_generators = serializers.BooleanField(required=False)
    dataset = DatasetSerializer(required=False)
    phantom = PhantomSerializer(required=False)
    translation = TranslationSerializer(required=False)
    segmentation = SegmentationSerializer(required=False)
    self_training = SelfTrainingSerializer(required=False)
    evaluation = EvaluationSerializer(required=False)

    def validate(self, attrs):
        """U-net-генератор, если он участвует в запуске, должен делить срез без остатка"""
        uses_unet = attrs.get('generator', 'resnet') == 'unet' or attrs.get('compare_generators', False)
        translation = attrs.get('translation', {})
        slice_size = translation.get('slice_size', TranslationConfig.slice_size)
        factor = 2 ** translation.get('unet_down', TranslationConfig.unet_down)
        if uses_unet and slice_size % factor:
            raise serializers.ValidationError(
                {'translation': {'unet_down': [f'Slice size {slice_size} is not divisible by 2^unet_down = {factor}.']}}
            )
        return attrs
