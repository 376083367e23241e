use serde::Serialize;

use super::config::NetworkConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Stem,
    Dense,
    Transition,
}

/// One feature-producing layer. Inputs are earlier node ids; every input is
/// average-pooled down to this node's stage before concatenation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Node {
    pub id: usize,
    pub name: String,
    pub kind: NodeKind,
    pub stage: usize,
    pub inputs: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerGraph {
    pub nodes: Vec<Node>,
    pub head_inputs: Vec<usize>,
    pub head_channels: usize,
}

impl LayerGraph {
    pub fn build(cfg: &NetworkConfig) -> Self {
        let stem = Node {
            id: 0,
            name: "stem".into(),
            kind: NodeKind::Stem,
            stage: 0,
            inputs: vec![],
            in_channels: 1,
            out_channels: cfg.stem_out(),
        };
        let mut nodes = vec![stem];
        let mut available = vec![0usize];
        let channels = |nodes: &[Node], ids: &[usize]| -> usize {
            ids.iter().map(|&i| nodes[i].out_channels).sum()
        };
        let mut layer = 0;
        for (stage, &blocks) in cfg.blocks.iter().enumerate() {
            if stage > 0 && cfg.compression < 1.0 {
                let cin = channels(&nodes, &available);
                let out = ((cin as f64 * cfg.compression).ceil() as usize).max(1);
                let id = nodes.len();
                nodes.push(Node {
                    id,
                    name: format!("transition{stage}"),
                    kind: NodeKind::Transition,
                    stage,
                    inputs: available.clone(),
                    in_channels: cin,
                    out_channels: out,
                });
                available = vec![id];
            }
            for _ in 0..blocks {
                let id = nodes.len();
                let cin = channels(&nodes, &available);
                nodes.push(Node {
                    id,
                    name: format!("layer{layer}"),
                    kind: NodeKind::Dense,
                    stage,
                    inputs: available.clone(),
                    in_channels: cin,
                    out_channels: cfg.growth(stage),
                });
                available.push(id);
                layer += 1;
            }
        }
        let head_channels = channels(&nodes, &available);
        Self {
            nodes,
            head_inputs: available,
            head_channels,
        }
    }

    pub fn dense_layers(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Dense)
    }

    /// Stage in which the head reads its inputs.
    pub fn final_stage(&self) -> usize {
        self.nodes.last().map_or(0, |n| n.stage)
    }

    /// Human-readable adjacency listing, one node per line.
    pub fn adjacency(&self) -> String {
        let mut s = String::new();
        for n in &self.nodes {
            let ins: Vec<&str> = n.inputs.iter().map(|&i| self.nodes[i].name.as_str()).collect();
            s.push_str(&format!(
                "{} [stage {}, {} -> {}] <- {}\n",
                n.name,
                n.stage,
                n.in_channels,
                n.out_channels,
                if ins.is_empty() { "input".to_string() } else { ins.join(", ") }
            ));
        }
        let ins: Vec<&str> = self.head_inputs.iter().map(|&i| self.nodes[i].name.as_str()).collect();
        s.push_str(&format!("head [{}] <- {}\n", self.head_channels, ins.join(", ")));
        s
    }
}
