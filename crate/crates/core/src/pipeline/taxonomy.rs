//! Which training objects each expert is fine-tuned on.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::env::{category_name, CategoryFlags, ObjectSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Generalist,
    Specialist,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertAssignment {
    pub label: String,
    pub role: Role,
    pub categories: Vec<usize>,
    /// Training objects this expert may see, ascending.
    pub object_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub experts: Vec<ExpertAssignment>,
}

fn present_categories(objects: &[ObjectSpec]) -> Vec<usize> {
    objects.iter().map(|o| o.category).collect::<BTreeSet<_>>().into_iter().collect()
}

fn ids_of(objects: &[ObjectSpec], cats: &[usize]) -> Vec<usize> {
    let mut ids: Vec<usize> = objects.iter().filter(|o| cats.contains(&o.category)).map(|o| o.id).collect();
    ids.sort_unstable();
    ids
}

fn specialist(objects: &[ObjectSpec], c: usize) -> ExpertAssignment {
    ExpertAssignment {
        label: category_name(c).to_string(),
        role: Role::Specialist,
        categories: vec![c],
        object_ids: ids_of(objects, &[c]),
    }
}

fn generalist(objects: &[ObjectSpec]) -> ExpertAssignment {
    let cats = present_categories(objects);
    ExpertAssignment { label: "generalist".into(), role: Role::Generalist, object_ids: ids_of(objects, &cats), categories: cats }
}

impl Taxonomy {
    /// Expert layout for `n` experts over `objects`.
    ///
    /// * 1: one generalist.
    /// * 4: specialists on the three worst categories of `ranking` (worst first)
    ///   plus a generalist.
    /// * 6: one specialist per category; all six must be present.
    /// * 8: one specialist per non-jam category and two per jam category, split
    ///   by 2-means on point-cloud features; all six must be present.
    pub fn build(n: usize, objects: &[ObjectSpec], ranking: Option<&[usize]>) -> Result<Self, PipelineError> {
        let cats = present_categories(objects);
        let bad = |msg: String| Err(PipelineError::Taxonomy(msg));
        let experts = match n {
            1 => vec![generalist(objects)],
            4 => {
                let ranking = match ranking {
                    Some(r) => r,
                    None => return bad("the 4-expert layout needs a category ranking".into()),
                };
                let worst: Vec<usize> = ranking.iter().copied().filter(|c| cats.contains(c)).take(3).collect();
                if worst.len() < 3 {
                    return bad(format!("the 4-expert layout needs 3 ranked categories, {} available", worst.len()));
                }
                let mut e: Vec<_> = worst.iter().map(|&c| specialist(objects, c)).collect();
                e.push(generalist(objects));
                e
            }
            6 => {
                if cats.len() != 6 {
                    return bad(format!("the 6-expert layout needs all 6 categories, found {}", cats.len()));
                }
                cats.iter().map(|&c| specialist(objects, c)).collect()
            }
            8 => {
                if cats.len() != 6 {
                    return bad(format!("the 8-expert layout needs all 6 categories, found {}", cats.len()));
                }
                let mut e = Vec::new();
                for &c in &cats {
                    if !CategoryFlags::of(c).jam {
                        e.push(specialist(objects, c));
                        continue;
                    }
                    let mut members: Vec<&ObjectSpec> = objects.iter().filter(|o| o.category == c).collect();
                    members.sort_by_key(|o| o.id);
                    let points: Vec<&[f64]> = members.iter().map(|o| o.pc_feature.as_slice()).collect();
                    let assign = kmeans2(&points);
                    for k in 0..2 {
                        let ids: Vec<usize> =
                            members.iter().zip(&assign).filter(|(_, &a)| a == k).map(|(o, _)| o.id).collect();
                        e.push(ExpertAssignment {
                            label: format!("{}.{}", category_name(c), k),
                            role: Role::Specialist,
                            categories: vec![c],
                            object_ids: ids,
                        });
                    }
                }
                e
            }
            other => return bad(format!("{other} experts is not a supported layout (1, 4, 6 or 8)")),
        };
        let t = Taxonomy { experts };
        t.validate(objects)?;
        Ok(t)
    }

    /// Every expert has data, every category is covered, and assignments agree
    /// with the object categories.
    pub fn validate(&self, objects: &[ObjectSpec]) -> Result<(), PipelineError> {
        for (i, e) in self.experts.iter().enumerate() {
            if e.object_ids.is_empty() {
                return Err(PipelineError::Taxonomy(format!("expert {i} ({}) covers no objects", e.label)));
            }
            for id in &e.object_ids {
                let obj = objects.iter().find(|o| o.id == *id);
                if !obj.is_some_and(|o| e.categories.contains(&o.category)) {
                    return Err(PipelineError::Taxonomy(format!("expert {i} lists object {id} outside its categories")));
                }
            }
        }
        for c in present_categories(objects) {
            if !self.experts.iter().any(|e| e.categories.contains(&c)) {
                return Err(PipelineError::Taxonomy(format!("category {c} is covered by no expert")));
            }
        }
        Ok(())
    }

    pub fn allows(&self, expert: usize, obj: &ObjectSpec) -> bool {
        self.experts
            .get(expert)
            .is_some_and(|e| e.categories.contains(&obj.category) && e.object_ids.binary_search(&obj.id).is_ok())
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Deterministic 2-means. Seeds are the first point and the point farthest from
/// it; Lloyd iterations run until assignments stop changing. Cluster 0 always
/// holds the first point. With fewer than two distinct points the list is cut
/// in half instead.
pub fn kmeans2(points: &[&[f64]]) -> Vec<usize> {
    let n = points.len();
    let halves = || (0..n).map(|i| usize::from(i >= n.div_ceil(2))).collect::<Vec<_>>();
    if n < 2 {
        return vec![0; n];
    }
    let far = (1..n).fold(0, |best, i| if dist2(points[i], points[0]) > dist2(points[best], points[0]) { i } else { best });
    if dist2(points[far], points[0]) == 0.0 {
        return halves();
    }
    let mut centers = [points[0].to_vec(), points[far].to_vec()];
    let mut assign = vec![usize::MAX; n];
    for _ in 0..100 {
        let next: Vec<usize> =
            points.iter().map(|p| usize::from(dist2(p, &centers[1]) < dist2(p, &centers[0]))).collect();
        if next == assign {
            break;
        }
        assign = next;
        for (k, center) in centers.iter_mut().enumerate() {
            let members: Vec<&[f64]> = points.iter().zip(&assign).filter(|(_, &a)| a == k).map(|(p, _)| *p).collect();
            if members.is_empty() {
                return halves();
            }
            for (d, c) in center.iter_mut().enumerate() {
                *c = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    if assign[0] == 1 {
        assign.iter_mut().for_each(|a| *a = 1 - *a);
    }
    assign
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::generate_objects;

    #[test]
    fn kmeans_separates_two_blobs() {
        let pts: Vec<Vec<f64>> =
            vec![vec![0.0, 0.1], vec![5.0, 5.0], vec![0.1, 0.0], vec![5.1, 4.9], vec![-0.1, 0.0]];
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        assert_eq!(kmeans2(&refs), vec![0, 1, 0, 1, 0]);
        let same = vec![vec![1.0]; 4];
        let refs: Vec<&[f64]> = same.iter().map(|p| p.as_slice()).collect();
        assert_eq!(kmeans2(&refs), vec![0, 0, 1, 1]);
    }

    #[test]
    fn layouts_cover_every_category() {
        let objs = generate_objects(100, 3).unwrap();
        for n in [1, 6, 8] {
            let t = Taxonomy::build(n, &objs, None).unwrap();
            assert_eq!(t.experts.len(), n);
        }
        let t = Taxonomy::build(4, &objs, Some(&[5, 4, 3, 0, 1, 2])).unwrap();
        assert_eq!(t.experts.iter().map(|e| e.categories.clone()).take(3).collect::<Vec<_>>(), vec![vec![5], vec![4], vec![3]]);
        assert_eq!(t.experts[3].role, Role::Generalist);
        let t8 = Taxonomy::build(8, &objs, None).unwrap();
        let jam_ids: usize = t8.experts.iter().filter(|e| e.categories == [4]).map(|e| e.object_ids.len()).sum();
        assert_eq!(jam_ids, objs.iter().filter(|o| o.category == 4).count());
    }

    #[test]
    fn unsupported_layouts_are_errors() {
        let objs = crate::env::generate_objects_with(20, 3, &[0, 1]).unwrap();
        assert!(Taxonomy::build(6, &objs, None).is_err());
        assert!(Taxonomy::build(4, &objs, Some(&[0, 1])).is_err());
        assert!(Taxonomy::build(3, &objs, None).is_err());
        let t = Taxonomy { experts: vec![ExpertAssignment { label: "x".into(), role: Role::Specialist, categories: vec![0], object_ids: vec![] }] };
        assert!(t.validate(&objs).is_err());
    }
}
