use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use super::{dequantize, quantize, DatasetMeta, Image, LabelMap};
use crate::error::{Error, Result};

const META_FILE: &str = "meta.txt";

pub fn write_label_png(path: &Path, label: &LabelMap) -> Result<()> {
    write_png(path, label.width(), label.height(), png::ColorType::Grayscale, label.data())
}

pub fn write_rgb_png(path: &Path, image: &Image) -> Result<()> {
    let hw = image.height() * image.width();
    let src = image.data();
    let mut bytes = Vec::with_capacity(3 * hw);
    for p in 0..hw {
        for k in 0..3 {
            bytes.push(quantize(src[k * hw + p]));
        }
    }
    write_png(path, image.width(), image.height(), png::ColorType::Rgb, &bytes)
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| Error::dataset(path, e.to_string()))?;
    writer.write_image_data(bytes).map_err(|e| Error::dataset(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::dataset(path, e.to_string()))
}

fn read_png(path: &Path, want: png::ColorType) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::dataset(path, e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::dataset(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::dataset(path, e.to_string()))?;
    if info.color_type != want || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::dataset(
            path,
            format!("expected 8-bit {want:?}, found {:?} {:?}", info.bit_depth, info.color_type),
        ));
    }
    buf.truncate(info.buffer_size());
    Ok((info.height as usize, info.width as usize, buf))
}

pub fn read_label_png(path: &Path, num_classes: usize) -> Result<LabelMap> {
    let (h, w, data) = read_png(path, png::ColorType::Grayscale)?;
    let label = LabelMap::new(h, w, data)?;
    label.check_range(num_classes).map_err(|e| Error::dataset(path, e.to_string()))?;
    Ok(label)
}

pub fn read_rgb_png(path: &Path) -> Result<Image> {
    let (h, w, bytes) = read_png(path, png::ColorType::Rgb)?;
    let hw = h * w;
    let mut data = vec![0.0; 3 * hw];
    for p in 0..hw {
        for k in 0..3 {
            data[k * hw + p] = dequantize(bytes[3 * p + k]);
        }
    }
    Image::new(h, w, data)
}

fn meta_text(meta: &DatasetMeta) -> String {
    let mut s = format!("num_classes={}\nheight={}\nwidth={}\n", meta.num_classes, meta.height, meta.width);
    for (i, name) in meta.class_names.iter().enumerate() {
        s += &format!("class_{i}={name}\n");
    }
    s += &format!("small_max={}\nlarge_min={}\n", meta.small_max, meta.large_min);
    s
}

fn parse_meta(path: &Path, text: &str) -> Result<DatasetMeta> {
    let mut fields = std::collections::HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::dataset(path, format!("line {}: expected key=value", n + 1)))?;
        fields.insert(k.trim().to_string(), v.trim().to_string());
    }
    let number = |key: &str| -> Result<usize> {
        let v = fields.get(key).ok_or_else(|| Error::dataset(path, format!("missing key {key}")))?;
        v.parse().map_err(|_| Error::dataset(path, format!("{key}={v} is not a non-negative integer")))
    };
    let num_classes = number("num_classes")?;
    let class_names = (0..num_classes)
        .map(|i| {
            fields.get(&format!("class_{i}")).cloned().ok_or_else(|| Error::dataset(path, format!("missing key class_{i}")))
        })
        .collect::<Result<Vec<_>>>()?;
    DatasetMeta::new(
        num_classes,
        number("height")?,
        number("width")?,
        class_names,
        number("small_max")?,
        number("large_min")?,
    )
    .map_err(|e| Error::dataset(path, e.to_string()))
}

pub fn save_dataset(dir: &Path, meta: &DatasetMeta, scenes: &[(LabelMap, Image)]) -> Result<()> {
    meta.validate()?;
    for sub in ["labels", "images"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, meta_text(meta)).map_err(|e| Error::io(&meta_path, e))?;
    for (i, (label, image)) in scenes.iter().enumerate() {
        if (label.height(), label.width()) != (meta.height, meta.width) {
            return Err(Error::InvalidMeta(format!("scene {i} is {}x{}", label.height(), label.width())));
        }
        label.check_range(meta.num_classes)?;
        let name = format!("{i:06}.png");
        write_label_png(&dir.join("labels").join(&name), label)?;
        write_rgb_png(&dir.join("images").join(&name), image)?;
    }
    Ok(())
}

/// Lazily reads scenes of a dataset directory; safe to share across threads.
#[derive(Clone, Debug)]
pub struct DatasetReader {
    root: PathBuf,
    meta: DatasetMeta,
    names: Vec<String>,
}

impl DatasetReader {
    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, index: usize) -> Result<(LabelMap, Image)> {
        let name = &self.names[index];
        let label_path = self.root.join("labels").join(name);
        let image_path = self.root.join("images").join(name);
        let label = read_label_png(&label_path, self.meta.num_classes)?;
        let image = read_rgb_png(&image_path)?;
        for (path, dims) in [(&label_path, (label.height(), label.width())), (&image_path, (image.height(), image.width()))] {
            if dims != (self.meta.height, self.meta.width) {
                return Err(Error::dataset(
                    path,
                    format!("size {}x{} differs from meta {}x{}", dims.0, dims.1, self.meta.height, self.meta.width),
                ));
            }
        }
        Ok((label, image))
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<(LabelMap, Image)>> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    pub fn load_all(&self) -> Result<Vec<(LabelMap, Image)>> {
        use rayon::prelude::*;
        (0..self.len()).into_par_iter().map(|i| self.get(i)).collect()
    }
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Opens a dataset directory and checks that labels and images pair up.
pub fn load_dataset(dir: &Path) -> Result<DatasetReader> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta = parse_meta(&meta_path, &text)?;
    let labels = png_names(&dir.join("labels"))?;
    let images = png_names(&dir.join("images"))?;
    if let Some(name) = labels.iter().find(|n| images.binary_search(n).is_err()) {
        return Err(Error::dataset(dir.join("labels").join(name), "no matching image"));
    }
    if let Some(name) = images.iter().find(|n| labels.binary_search(n).is_err()) {
        return Err(Error::dataset(dir.join("images").join(name), "no matching label"));
    }
    Ok(DatasetReader { root: dir.to_path_buf(), meta, names: labels })
}
