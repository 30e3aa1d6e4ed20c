//! Bandwidth allocation for concurrent flows over shared capacities.

/// Max-min fair rates by progressive filling. `paths[f]` lists the
/// resources flow `f` crosses; `caps[r]` is the capacity of resource `r`.
/// Flows with an empty path get `f64::INFINITY`.
pub fn max_min_fair(caps: &[f64], paths: &[Vec<usize>]) -> Vec<f64> {
    let mut rates = vec![f64::INFINITY; paths.len()];
    let mut frozen = vec![false; paths.len()];
    let mut left = caps.to_vec();
    let mut users = vec![0usize; caps.len()];
    for p in paths {
        for &r in p {
            users[r] += 1;
        }
    }
    let mut remaining = paths.iter().filter(|p| !p.is_empty()).count();
    for (f, p) in paths.iter().enumerate() {
        if p.is_empty() {
            frozen[f] = true;
        }
    }
    while remaining > 0 {
        // tightest resource: smallest equal share among its unfrozen flows
        let Some((bottleneck, share)) = (0..caps.len())
            .filter(|&r| users[r] > 0)
            .map(|r| (r, left[r].max(0.0) / users[r] as f64))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        else {
            break;
        };
        for (f, p) in paths.iter().enumerate() {
            if frozen[f] || !p.contains(&bottleneck) {
                continue;
            }
            rates[f] = share;
            frozen[f] = true;
            remaining -= 1;
            for &r in p {
                left[r] -= share;
                users[r] -= 1;
            }
        }
    }
    rates
}

/// Each flow runs at the smallest capacity on its path, ignoring others.
pub fn uncontended(caps: &[f64], paths: &[Vec<usize>]) -> Vec<f64> {
    paths
        .iter()
        .map(|p| p.iter().map(|&r| caps[r]).fold(f64::INFINITY, f64::min))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_split_on_one_link() {
        let rates = max_min_fair(&[100.0], &[vec![0], vec![0], vec![0], vec![0]]);
        assert_eq!(rates, vec![25.0; 4]);
    }

    #[test]
    fn classic_max_min() {
        // flow 0 crosses both links, flow 1 only link 0, flow 2 only link 1
        let rates = max_min_fair(&[10.0, 4.0], &[vec![0, 1], vec![0], vec![1]]);
        assert_eq!(rates, vec![2.0, 8.0, 2.0]);
    }

    #[test]
    fn capacity_respected() {
        let caps = [7.0, 3.0, 11.0];
        let paths = vec![vec![0], vec![0, 1], vec![1, 2], vec![2], vec![0, 2]];
        let rates = max_min_fair(&caps, &paths);
        for (r, cap) in caps.iter().enumerate() {
            let used: f64 = paths
                .iter()
                .zip(&rates)
                .filter(|(p, _)| p.contains(&r))
                .map(|(_, x)| x)
                .sum();
            assert!(used <= cap + 1e-9);
        }
    }

    #[test]
    fn uncontended_takes_min() {
        assert_eq!(uncontended(&[5.0, 2.0], &[vec![0, 1], vec![0]]), vec![2.0, 5.0]);
    }
}
