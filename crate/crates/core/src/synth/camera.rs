use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Matrix3x4, Vector3};

use crate::error::{Error, Result};

/// Pinhole camera with world-to-camera extrinsics. Image `y` points down and
/// pixel `(i, j)` covers `[i, i+1) × [j, j+1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        intrinsics: [f64; 4],
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            fx: intrinsics[0],
            fy: intrinsics[1],
            cx: intrinsics[2],
            cy: intrinsics[3],
            rotation,
            translation,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with `up` mapped to image-up.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let z = (target - eye).normalize();
        let down = -up;
        let y = (down - z * down.dot(&z)).normalize();
        let x = y.cross(&z);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        Self::new(
            [focal, focal, width as f64 / 2.0, height as f64 / 2.0],
            rotation,
            translation,
            width,
            height,
        )
    }

    /// The default rig for a `size × size` render: 4 units in front of the
    /// head, looking at the origin.
    pub fn frontal(size: usize) -> Self {
        Self::orbit(size, 0.0, 4.0)
    }

    /// Camera on a horizontal circle of radius `distance` around the origin,
    /// `yaw` radians from the frontal position.
    pub fn orbit(size: usize, yaw: f64, distance: f64) -> Self {
        let eye = Vector3::new(distance * yaw.sin(), 0.0, -distance * yaw.cos());
        Self::look_at(eye, Vector3::zeros(), Vector3::y(), 1.4 * size as f64, size, size)
            .expect("orbit camera is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).amax();
        if ortho > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::arg("camera rotation is not a proper rotation"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::arg("camera focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::arg("camera image size must be positive"));
        }
        Ok(())
    }

    #[inline]
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Continuous pixel coordinates and camera depth; `None` behind the camera.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Option<([f64; 2], f64)> {
        let c = self.to_camera(p);
        if c.z <= 1e-9 {
            return None;
        }
        Some(([self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy], c.z))
    }

    pub fn intrinsic_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// `P = K [R | t]`.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        rt.set_column(3, &self.translation);
        self.intrinsic_matrix() * rt
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// World-space unit direction of the ray through a continuous pixel.
    pub fn ray_direction(&self, pixel: [f64; 2]) -> Vector3<f64> {
        let d = Vector3::new((pixel[0] - self.cx) / self.fx, (pixel[1] - self.cy) / self.fy, 1.0);
        (self.rotation.transpose() * d).normalize()
    }

    /// Text form: rotation (9, row-major), translation (3), `fx fy cx cy`,
    /// `width height`, one group per line.
    pub fn write_text<W: Write>(&self, w: &mut W) -> Result<()> {
        let r = &self.rotation;
        let rows: Vec<String> = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| format!("{}", r[(i, j)]))
            .collect();
        writeln!(w, "{}", rows.join(" "))?;
        let t = &self.translation;
        writeln!(w, "{} {} {}", t.x, t.y, t.z)?;
        writeln!(w, "{} {} {} {}", self.fx, self.fy, self.cx, self.cy)?;
        writeln!(w, "{} {}", self.width, self.height)?;
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut values = Vec::with_capacity(18);
        let mut offset = 0u64;
        for line in r.split(b'\n') {
            let line = line?;
            let text = String::from_utf8_lossy(&line);
            let mut col = 0usize;
            for tok in text.split(' ') {
                if !tok.trim().is_empty() {
                    let v: f64 = tok.trim().parse().map_err(|_| {
                        Error::format("camera file", offset + col as u64, format!("bad number {tok:?}"))
                    })?;
                    values.push(v);
                }
                col += tok.len() + 1;
            }
            offset += line.len() as u64 + 1;
        }
        if values.len() != 18 {
            return Err(Error::format(
                "camera file",
                offset,
                format!("expected 18 numbers, found {}", values.len()),
            ));
        }
        let rotation = Matrix3::from_row_slice(&values[..9]);
        let translation = Vector3::new(values[9], values[10], values[11]);
        let (w, h) = (values[16], values[17]);
        if w < 1.0 || h < 1.0 || w.fract() != 0.0 || h.fract() != 0.0 {
            return Err(Error::format("camera file", offset, "image size must be positive integers"));
        }
        Self::new(
            [values[12], values[13], values[14], values[15]],
            rotation,
            translation,
            w as usize,
            h as usize,
        )
        .map_err(|e| Error::format("camera file", 0, e.to_string()))
    }
}
