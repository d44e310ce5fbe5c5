"""Physics-based phantom simulator and classical LI baseline."""
from .phantom import (
    AIR,
    BONE,
    MATERIALS,
    METAL,
    SOFT_TISSUE,
    Ellipse,
    EllipseDrift,
    ImplantTag,
    PhantomSpec,
    random_phantom,
    rasterize,
)
from .physics import (
    CtGeometry,
    SpectrumModel,
    add_photon_noise,
    default_spectrum,
    fbp,
    log_normalize,
    project_poly,
    radon,
    radon_stack,
    to_hu,
    water_linearize,
)
from .simulate import SimulatedPatient, simulate_pair
from .baseline import li_correct, li_reconstruct, metal_trace
from . import dataset
