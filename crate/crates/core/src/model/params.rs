//! Parameter trees, generic over the leaf type.
//!
//! `Ccead<Tensor>` holds values, `Ccead<Var>` the same parameters bound into
//! a graph, `Ccead<Vec<usize>>` their shapes. Leaves are visited in a fixed
//! order under dotted names such as `decoder.gru.w_ux`.

/// Weights are stored `[in × out]` and applied as `x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gru<T> {
    pub w_ux: T,
    pub u_uu: T,
    pub b_u: T,
    pub w_rx: T,
    pub u_rr: T,
    pub b_r: T,
    pub w_hx: T,
    pub u_hh: T,
    pub b_h: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub char_embedding: T,
    pub gru: Gru<T>,
    /// One `[width × embed × maps]` bank per filter width.
    pub filters: Vec<T>,
    pub w_fc: T,
    pub b_fc: T,
    pub w_fusion: T,
    pub b_fusion: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub w_s: T,
    pub w_h: T,
    pub b: T,
    pub v: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T> {
    pub word_embedding: T,
    pub gru: Gru<T>,
    pub attention: Attention<T>,
    pub output: T,
    pub b_output: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ccead<T> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

macro_rules! leaf_methods {
    ($ty:ident { $($field:ident),* }) => {
        impl<T> $ty<T> {
            pub(crate) fn map_at<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> $ty<U> {
                $ty { $($field: f(&join(prefix, stringify!($field)), &self.$field)),* }
            }

            pub(crate) fn visit_at<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T)) {
                $(f(&join(prefix, stringify!($field)), &self.$field);)*
            }

            pub(crate) fn visit_mut_at(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
                $(f(&join(prefix, stringify!($field)), &mut self.$field);)*
            }
        }
    };
}

leaf_methods!(Gru {
    w_ux,
    u_uu,
    b_u,
    w_rx,
    u_rr,
    b_r,
    w_hx,
    u_hh,
    b_h
});
leaf_methods!(Attention { w_s, w_h, b, v });

impl<T> Encoder<T> {
    fn map_at<U>(&self, p: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Encoder<U> {
        Encoder {
            char_embedding: f(&join(p, "char_embedding"), &self.char_embedding),
            gru: self.gru.map_at(&join(p, "gru"), f),
            filters: self
                .filters
                .iter()
                .enumerate()
                .map(|(i, t)| f(&join(p, &format!("filters.{i}")), t))
                .collect(),
            w_fc: f(&join(p, "w_fc"), &self.w_fc),
            b_fc: f(&join(p, "b_fc"), &self.b_fc),
            w_fusion: f(&join(p, "w_fusion"), &self.w_fusion),
            b_fusion: f(&join(p, "b_fusion"), &self.b_fusion),
        }
    }

    fn visit_at<'a>(&'a self, p: &str, f: &mut dyn FnMut(&str, &'a T)) {
        f(&join(p, "char_embedding"), &self.char_embedding);
        self.gru.visit_at(&join(p, "gru"), f);
        for (i, t) in self.filters.iter().enumerate() {
            f(&join(p, &format!("filters.{i}")), t);
        }
        f(&join(p, "w_fc"), &self.w_fc);
        f(&join(p, "b_fc"), &self.b_fc);
        f(&join(p, "w_fusion"), &self.w_fusion);
        f(&join(p, "b_fusion"), &self.b_fusion);
    }

    fn visit_mut_at(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(p, "char_embedding"), &mut self.char_embedding);
        self.gru.visit_mut_at(&join(p, "gru"), f);
        for (i, t) in self.filters.iter_mut().enumerate() {
            f(&join(p, &format!("filters.{i}")), t);
        }
        f(&join(p, "w_fc"), &mut self.w_fc);
        f(&join(p, "b_fc"), &mut self.b_fc);
        f(&join(p, "w_fusion"), &mut self.w_fusion);
        f(&join(p, "b_fusion"), &mut self.b_fusion);
    }
}

impl<T> Decoder<T> {
    fn map_at<U>(&self, p: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Decoder<U> {
        Decoder {
            word_embedding: f(&join(p, "word_embedding"), &self.word_embedding),
            gru: self.gru.map_at(&join(p, "gru"), f),
            attention: self.attention.map_at(&join(p, "attention"), f),
            output: f(&join(p, "output"), &self.output),
            b_output: f(&join(p, "b_output"), &self.b_output),
        }
    }

    fn visit_at<'a>(&'a self, p: &str, f: &mut dyn FnMut(&str, &'a T)) {
        f(&join(p, "word_embedding"), &self.word_embedding);
        self.gru.visit_at(&join(p, "gru"), f);
        self.attention.visit_at(&join(p, "attention"), f);
        f(&join(p, "output"), &self.output);
        f(&join(p, "b_output"), &self.b_output);
    }

    fn visit_mut_at(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(p, "word_embedding"), &mut self.word_embedding);
        self.gru.visit_mut_at(&join(p, "gru"), f);
        self.attention.visit_mut_at(&join(p, "attention"), f);
        f(&join(p, "output"), &mut self.output);
        f(&join(p, "b_output"), &mut self.b_output);
    }
}

impl<T> Ccead<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&str, &T) -> U) -> Ccead<U> {
        Ccead {
            encoder: self.encoder.map_at("encoder", f),
            decoder: self.decoder.map_at("decoder", f),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a T)) {
        self.encoder.visit_at("encoder", f);
        self.decoder.visit_at("decoder", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut T)) {
        self.encoder.visit_mut_at("encoder", f);
        self.decoder.visit_mut_at("decoder", f);
    }

    /// Leaves in visiting order.
    pub fn leaves(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n.to_string(), t)));
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut names = Vec::new();
        self.visit(&mut |n, _| names.push(n.to_string()));
        let mut refs: Vec<&mut T> = Vec::with_capacity(names.len());
        collect_mut(self, &mut refs);
        names.into_iter().zip(refs).collect()
    }
}

fn collect_mut<'a, T>(tree: &'a mut Ccead<T>, out: &mut Vec<&'a mut T>) {
    let Ccead { encoder, decoder } = tree;
    let Encoder {
        char_embedding,
        gru,
        filters,
        w_fc,
        b_fc,
        w_fusion,
        b_fusion,
    } = encoder;
    out.push(char_embedding);
    push_gru(gru, out);
    out.extend(filters.iter_mut());
    out.extend([w_fc, b_fc, w_fusion, b_fusion]);
    let Decoder {
        word_embedding,
        gru,
        attention,
        output,
        b_output,
    } = decoder;
    out.push(word_embedding);
    push_gru(gru, out);
    let Attention { w_s, w_h, b, v } = attention;
    out.extend([w_s, w_h, b, v, output, b_output]);
}

fn push_gru<'a, T>(g: &'a mut Gru<T>, out: &mut Vec<&'a mut T>) {
    let Gru {
        w_ux,
        u_uu,
        b_u,
        w_rx,
        u_rr,
        b_r,
        w_hx,
        u_hh,
        b_h,
    } = g;
    out.extend([w_ux, u_uu, b_u, w_rx, u_rr, b_r, w_hx, u_hh, b_h]);
}
