//! Differentiable splat rasterizer.

mod camera;
mod image;
mod raster;

pub use camera::Camera;
pub use image::Image;
pub use raster::{
    project, project_backward, render, render_backward, render_oracle, FragmentGrad, Framebuffer,
    RenderCache, SplatFragment, SplatGrads, SplatScene, ALPHA_MAX, LOWPASS, MAX_POWER, MIN_DET,
    TILE, TRANSMITTANCE_MIN,
};

impl Framebuffer {
    pub fn rgb_image(&self) -> Image {
        Image::new(self.width, self.height, 3, self.rgb.clone()).expect("framebuffer shape")
    }

    pub fn alpha_image(&self) -> Image {
        Image::new(self.width, self.height, 1, self.alpha.clone()).expect("framebuffer shape")
    }
}
