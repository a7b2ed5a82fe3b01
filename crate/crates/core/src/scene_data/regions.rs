use super::LabelMap;

/// A 4-connected region of equal class id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    pub class: u8,
    pub pixels: usize,
    pub top: usize,
    pub left: usize,
    /// Exclusive.
    pub bottom: usize,
    /// Exclusive.
    pub right: usize,
}

#[derive(Clone, Debug)]
pub struct Components {
    /// Component index of every pixel, row-major.
    pub ids: Vec<u32>,
    pub list: Vec<Component>,
}

/// Labels 4-connected components in row-major discovery order.
pub fn connected_components(label: &LabelMap) -> Components {
    let (h, w) = (label.height(), label.width());
    let data = label.data();
    let mut ids = vec![u32::MAX; h * w];
    let mut list = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if ids[start] != u32::MAX {
            continue;
        }
        let id = list.len() as u32;
        let class = data[start];
        let mut comp = Component { class, pixels: 0, top: h, left: w, bottom: 0, right: 0 };
        ids[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (r, c) = (p / w, p % w);
            comp.pixels += 1;
            comp.top = comp.top.min(r);
            comp.left = comp.left.min(c);
            comp.bottom = comp.bottom.max(r + 1);
            comp.right = comp.right.max(c + 1);
            let mut visit = |q: usize| {
                if ids[q] == u32::MAX && data[q] == class {
                    ids[q] = id;
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
        list.push(comp);
    }
    Components { ids, list }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_pixels_are_separate_components() {
        let l = LabelMap::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        let cc = connected_components(&l);
        assert_eq!(cc.list.len(), 4);
        assert!(cc.list.iter().all(|c| c.pixels == 1));
    }

    #[test]
    fn touching_same_class_objects_merge() {
        let l = LabelMap::new(3, 4, vec![0, 0, 0, 0, 2, 2, 2, 2, 0, 0, 0, 0]).unwrap();
        let cc = connected_components(&l);
        let objects: Vec<_> = cc.list.iter().filter(|c| c.class == 2).collect();
        assert_eq!(objects.len(), 1);
        assert_eq!(objects[0].pixels, 4);
        assert_eq!((objects[0].top, objects[0].bottom, objects[0].left, objects[0].right), (1, 2, 0, 4));
    }
}
