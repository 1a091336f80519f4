"""Small configurations shared by the test modules."""
from roaddefect.data import SceneSpec
from roaddefect.losses import LossConfig
from roaddefect.network import NetworkConfig
from roaddefect.train import TrainConfig


def tiny_network(variant="scm", **kw):
    base = dict(image_size=32, stem_width=4, widths=(4, 8), variant=variant, heads=2,
                attention_layers=1, model_dim=8, det_hidden=8, anchor_scales=(8.0, 16.0),
                anchor_ratios=(0.5, 2.0))
    base.update(kw)
    return NetworkConfig(**base)


def tiny_train(variant="scm", seed=0, **kw):
    net = tiny_network(variant, **kw.pop("network", {}))
    base = dict(seed=seed, epochs=2, batch_size=2, lr=0.01, momentum=0.9, network=net,
                loss=LossConfig(anchors_per_image=16),
                scene=SceneSpec(seed=seed, image_size=net.image_size, stride=net.stride, max_defects=2),
                train_count=4, eval_count=2)
    base.update(kw)
    return TrainConfig(**base)
