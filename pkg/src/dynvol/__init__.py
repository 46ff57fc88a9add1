"""dynvol: dynamic radiance fields conditioned on per-frame latent codes."""
from .field import (
    EncodingConfig,
    FieldParams,
    LatentTable,
    RayBatch,
    eval_dynerf,
    eval_nerf_t,
    gradients,
    init_field,
    init_latents,
    latent_at_time,
    positional_encode,
    project_latents,
)
from .geometry import CameraModel, Ray, camera_rays, generate_ray, look_at, spiral_trajectory
from .metrics import MetricReport, dssim, evaluate_sequence, mse, psnr, ssim
from .render import RenderConfig, composite, pdf_resample, render_image, render_ray, stratified_samples
from .sampling import (
    FrameSampler,
    build_frame_sampler,
    draw_rays,
    global_median_maps,
    isg_weight_map,
    ist_weight_map,
)
from .scene import (
    Emitter,
    MultiViewVideo,
    SyntheticSceneSpec,
    load_dataset,
    ring_rig,
    save_dataset,
    synthesize_dataset,
)
from .train import (
    Checkpoint,
    Model,
    TrainConfig,
    adam_step,
    build_stages,
    expand_latent_table,
    load_checkpoint,
    save_checkpoint,
)

__version__ = "0.1.0"
