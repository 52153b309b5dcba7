use crate::error::{Error, Result};

/// A clip of `frames × height × width × channels` values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Video {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid("video extents must be positive"));
        }
        if data.len() != frames * height * width * channels {
            return Err(Error::shape(
                "video",
                &[frames, height, width, channels],
                &[data.len()],
            ));
        }
        Ok(Video {
            frames,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(frames: usize, height: usize, width: usize, channels: usize, v: f32) -> Self {
        Video {
            frames,
            height,
            width,
            channels,
            data: vec![v; frames * height * width * channels],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(frames, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.frames, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[f * n..(f + 1) * n]
    }

    pub fn frame_mut(&mut self, f: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.data[f * n..(f + 1) * n]
    }

    #[inline]
    pub fn index(&self, f: usize, y: usize, x: usize, c: usize) -> usize {
        ((f * self.height + y) * self.width + x) * self.channels + c
    }

    pub fn get(&self, f: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(f, y, x, c)]
    }

    pub fn set(&mut self, f: usize, y: usize, x: usize, c: usize, v: f32) {
        let i = self.index(f, y, x, c);
        self.data[i] = v;
    }

    /// The same clip with every frame replaced by frame `f`.
    pub fn repeat_frame(&self, f: usize) -> Video {
        let src = self.frame(f);
        let mut data = Vec::with_capacity(self.data.len());
        for _ in 0..self.frames {
            data.extend_from_slice(src);
        }
        Video { data, ..*self }
    }

    /// Single-channel clip replicated to three identical channels.
    pub fn gray_to_rgb(&self) -> Result<Video> {
        if self.channels != 1 {
            return Err(Error::invalid("gray_to_rgb needs a 1-channel video"));
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Ok(Video {
            channels: 3,
            data,
            ..*self
        })
    }

    pub fn same_extent(&self, other: &Video) -> bool {
        self.dims() == other.dims()
    }
}
