from pvseg.synthgen.scene import (
    PanelGeometry,
    SceneSpec,
    SyntheticScene,
    generate,
    generate_scene,
    generate_scenes,
    write_dataset,
)

__all__ = [
    "PanelGeometry",
    "SceneSpec",
    "SyntheticScene",
    "generate",
    "generate_scene",
    "generate_scenes",
    "write_dataset",
]
