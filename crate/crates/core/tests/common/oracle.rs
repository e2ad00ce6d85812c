//! In-memory reference file system with the export's observable semantics.
//! Nodes live in an arena so handles keep working after unlink or rename.

use std::collections::BTreeMap;

use taskmesh::netfs::{FileAttr, FileKind, FsErrorCode, FsOp, FsReply, OpenMode, CHUNK_SIZE};

type Res<T> = Result<T, FsErrorCode>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Entry {
    File { data: Vec<u8>, mode: u16 },
    Dir { mode: u16 },
}

#[derive(Debug, Clone)]
enum Node {
    File {
        data: Vec<u8>,
        mode: u16,
    },
    Dir {
        children: BTreeMap<String, usize>,
        mode: u16,
    },
}

pub struct MemFs {
    nodes: Vec<Node>,
    handles: BTreeMap<u64, (usize, OpenMode)>,
    next_fh: u64,
    read_only: bool,
}

enum Slot {
    Found {
        parent: Option<(usize, String)>,
        node: usize,
    },
    Missing {
        parent: usize,
        name: String,
    },
}

fn split(path: &str) -> Res<Vec<String>> {
    let mut out: Vec<String> = Vec::new();
    for seg in path.split('/') {
        if seg.is_empty() || seg == "." {
            continue;
        }
        if seg == ".." {
            if out.pop().is_none() {
                return Err(FsErrorCode::NotFound);
            }
            continue;
        }
        if seg.contains('\0') {
            return Err(FsErrorCode::NotFound);
        }
        out.push(seg.to_string());
    }
    Ok(out)
}

impl MemFs {
    pub fn new(root_mode: u16, read_only: bool) -> Self {
        MemFs {
            nodes: vec![Node::Dir {
                children: BTreeMap::new(),
                mode: root_mode,
            }],
            handles: BTreeMap::new(),
            next_fh: 1,
            read_only,
        }
    }

    /// Seeds a file directly, bypassing the protocol.
    pub fn seed_file(&mut self, path: &str, data: &[u8], mode: u16) {
        let parts = split(path).unwrap();
        let mut dir = 0;
        for (i, part) in parts.iter().enumerate() {
            let last = i == parts.len() - 1;
            let existing = match &self.nodes[dir] {
                Node::Dir { children, .. } => children.get(part).copied(),
                Node::File { .. } => panic!("seed through a file"),
            };
            dir = match existing {
                Some(id) => id,
                None => {
                    let node = if last {
                        Node::File {
                            data: data.to_vec(),
                            mode,
                        }
                    } else {
                        Node::Dir {
                            children: BTreeMap::new(),
                            mode: 0o755,
                        }
                    };
                    self.nodes.push(node);
                    let id = self.nodes.len() - 1;
                    if let Node::Dir { children, .. } = &mut self.nodes[dir] {
                        children.insert(part.clone(), id);
                    }
                    id
                }
            };
        }
    }

    fn attr(&self, id: usize) -> FileAttr {
        match &self.nodes[id] {
            Node::File { data, mode } => FileAttr {
                kind: FileKind::File,
                size: data.len() as u64,
                mtime: 0,
                mode: *mode,
            },
            Node::Dir { mode, .. } => FileAttr {
                kind: FileKind::Directory,
                size: 0,
                mtime: 0,
                mode: *mode,
            },
        }
    }

    fn is_dir(&self, id: usize) -> bool {
        matches!(self.nodes[id], Node::Dir { .. })
    }

    fn children(&self, id: usize) -> &BTreeMap<String, usize> {
        match &self.nodes[id] {
            Node::Dir { children, .. } => children,
            Node::File { .. } => panic!("not a directory"),
        }
    }

    fn children_mut(&mut self, id: usize) -> &mut BTreeMap<String, usize> {
        match &mut self.nodes[id] {
            Node::Dir { children, .. } => children,
            Node::File { .. } => panic!("not a directory"),
        }
    }

    fn resolve(&self, parts: &[String]) -> Res<Slot> {
        let mut cur = 0;
        let mut parent = None;
        for (i, part) in parts.iter().enumerate() {
            if !self.is_dir(cur) {
                return Err(FsErrorCode::NotDir);
            }
            match self.children(cur).get(part) {
                Some(&next) => {
                    parent = Some((cur, part.clone()));
                    cur = next;
                }
                None if i + 1 == parts.len() => {
                    return Ok(Slot::Missing {
                        parent: cur,
                        name: part.clone(),
                    })
                }
                None => return Err(FsErrorCode::NotFound),
            }
        }
        Ok(Slot::Found { parent, node: cur })
    }

    fn existing(&self, path: &str) -> Res<(Option<(usize, String)>, usize)> {
        match self.resolve(&split(path)?)? {
            Slot::Found { parent, node } => Ok((parent, node)),
            Slot::Missing { .. } => Err(FsErrorCode::NotFound),
        }
    }

    fn add(&mut self, parent: usize, name: String, node: Node) -> usize {
        self.nodes.push(node);
        let id = self.nodes.len() - 1;
        self.children_mut(parent).insert(name, id);
        id
    }

    fn handle(&self, fh: u64) -> Res<(usize, OpenMode)> {
        self.handles.get(&fh).copied().ok_or(FsErrorCode::BadHandle)
    }

    pub fn apply(&mut self, op: &FsOp) -> Res<FsReply> {
        if self.read_only && op.is_mutation() {
            return Err(FsErrorCode::ReadOnly);
        }
        match op {
            FsOp::Lookup { path } | FsOp::Getattr { path } => {
                let (_, id) = self.existing(path)?;
                Ok(FsReply::Attr { attr: self.attr(id) })
            }
            FsOp::Readdir { path } => {
                let (_, id) = self.existing(path)?;
                if !self.is_dir(id) {
                    return Err(FsErrorCode::NotDir);
                }
                Ok(FsReply::Entries {
                    names: self.children(id).keys().cloned().collect(),
                })
            }
            FsOp::Open { path, mode } => {
                let id = match (self.resolve(&split(path)?)?, mode) {
                    (Slot::Found { node, .. }, _) if self.is_dir(node) => return Err(FsErrorCode::IsDir),
                    (Slot::Missing { .. }, OpenMode::Read | OpenMode::Write | OpenMode::Rw) => {
                        return Err(FsErrorCode::NotFound)
                    }
                    (Slot::Missing { parent, name }, OpenMode::CreateTruncate) => self.add(
                        parent,
                        name,
                        Node::File {
                            data: Vec::new(),
                            mode: 0o644,
                        },
                    ),
                    (Slot::Found { node, .. }, mode) => {
                        if *mode == OpenMode::CreateTruncate {
                            if let Node::File { data, .. } = &mut self.nodes[node] {
                                data.clear();
                            }
                        }
                        node
                    }
                };
                let fh = self.next_fh;
                self.next_fh += 1;
                self.handles.insert(fh, (id, *mode));
                Ok(FsReply::Opened {
                    fh,
                    attr: self.attr(id),
                })
            }
            FsOp::Read { fh, offset, len } => {
                let (id, mode) = self.handle(*fh)?;
                if !matches!(mode, OpenMode::Read | OpenMode::Rw) {
                    return Err(FsErrorCode::BadHandle);
                }
                if *len as usize > CHUNK_SIZE {
                    return Err(FsErrorCode::Io);
                }
                let Node::File { data, .. } = &self.nodes[id] else {
                    unreachable!()
                };
                let start = (*offset).min(data.len() as u64) as usize;
                let end = (start + *len as usize).min(data.len());
                Ok(FsReply::Data {
                    data: data[start..end].to_vec(),
                })
            }
            FsOp::Write {
                fh,
                offset,
                data: bytes,
            } => {
                let (id, mode) = self.handle(*fh)?;
                if mode == OpenMode::Read {
                    return Err(FsErrorCode::BadHandle);
                }
                if bytes.len() > CHUNK_SIZE {
                    return Err(FsErrorCode::Io);
                }
                let Node::File { data, .. } = &mut self.nodes[id] else {
                    unreachable!()
                };
                let end = *offset as usize + bytes.len();
                if !bytes.is_empty() && data.len() < end {
                    data.resize(end, 0);
                }
                if !bytes.is_empty() {
                    data[*offset as usize..end].copy_from_slice(bytes);
                }
                Ok(FsReply::Written {
                    count: bytes.len() as u64,
                })
            }
            FsOp::Create { path, mode } => match self.resolve(&split(path)?)? {
                Slot::Found { .. } => Err(FsErrorCode::Exists),
                Slot::Missing { parent, name } => {
                    let id = self.add(
                        parent,
                        name,
                        Node::File {
                            data: Vec::new(),
                            mode: mode & 0o7777,
                        },
                    );
                    Ok(FsReply::Attr { attr: self.attr(id) })
                }
            },
            FsOp::Mkdir { path } => match self.resolve(&split(path)?)? {
                Slot::Found { .. } => Err(FsErrorCode::Exists),
                Slot::Missing { parent, name } => {
                    let id = self.add(
                        parent,
                        name,
                        Node::Dir {
                            children: BTreeMap::new(),
                            mode: 0o755,
                        },
                    );
                    Ok(FsReply::Attr { attr: self.attr(id) })
                }
            },
            FsOp::Unlink { path } => {
                let (parent, id) = self.existing(path)?;
                if self.is_dir(id) {
                    return Err(FsErrorCode::IsDir);
                }
                let (p, name) = parent.expect("files have parents");
                self.children_mut(p).remove(&name);
                Ok(FsReply::Done)
            }
            FsOp::Rmdir { path } => {
                if split(path)?.is_empty() {
                    return Err(FsErrorCode::Io);
                }
                let (parent, id) = self.existing(path)?;
                if !self.is_dir(id) {
                    return Err(FsErrorCode::NotDir);
                }
                if !self.children(id).is_empty() {
                    return Err(FsErrorCode::NotEmpty);
                }
                let (p, name) = parent.expect("non-root");
                self.children_mut(p).remove(&name);
                Ok(FsReply::Done)
            }
            FsOp::Rename { from, to } => {
                let src = split(from)?;
                let dst = split(to)?;
                if src.is_empty() || dst.is_empty() {
                    return Err(FsErrorCode::Io);
                }
                let (src_parent, src_node) = match self.resolve(&src)? {
                    Slot::Found { parent, node } => (parent.expect("non-root"), node),
                    Slot::Missing { .. } => return Err(FsErrorCode::NotFound),
                };
                let dst_slot = self.resolve(&dst)?;
                if src == dst {
                    return Ok(FsReply::Done);
                }
                if self.is_dir(src_node) && dst.len() > src.len() && dst[..src.len()] == src[..] {
                    return Err(FsErrorCode::Io);
                }
                let (dst_parent, dst_name) = match dst_slot {
                    Slot::Missing { parent, name } => (parent, name),
                    Slot::Found { parent, node } => {
                        match (self.is_dir(src_node), self.is_dir(node)) {
                            (false, true) => return Err(FsErrorCode::IsDir),
                            (true, false) => return Err(FsErrorCode::NotDir),
                            (true, true) if !self.children(node).is_empty() => return Err(FsErrorCode::NotEmpty),
                            _ => {}
                        }
                        parent.expect("non-root")
                    }
                };
                self.children_mut(src_parent.0).remove(&src_parent.1);
                self.children_mut(dst_parent).insert(dst_name, src_node);
                Ok(FsReply::Done)
            }
            FsOp::Truncate { path, size } => {
                let (_, id) = self.existing(path)?;
                match &mut self.nodes[id] {
                    Node::Dir { .. } => Err(FsErrorCode::IsDir),
                    Node::File { data, .. } => {
                        data.resize(*size as usize, 0);
                        Ok(FsReply::Done)
                    }
                }
            }
            FsOp::Flush { fh } => self.handle(*fh).map(|_| FsReply::Done),
            FsOp::Release { fh } => self
                .handles
                .remove(fh)
                .map(|_| FsReply::Done)
                .ok_or(FsErrorCode::BadHandle),
        }
    }

    /// Every reachable path with its content, root excluded.
    pub fn tree(&self) -> BTreeMap<String, Entry> {
        let mut out = BTreeMap::new();
        let mut stack = vec![(0usize, String::new())];
        while let Some((id, prefix)) = stack.pop() {
            for (name, &child) in self.children(id) {
                let path = format!("{prefix}/{name}");
                match &self.nodes[child] {
                    Node::File { data, mode } => {
                        out.insert(
                            path,
                            Entry::File {
                                data: data.clone(),
                                mode: *mode,
                            },
                        );
                    }
                    Node::Dir { mode, .. } => {
                        out.insert(path.clone(), Entry::Dir { mode: *mode });
                        stack.push((child, path));
                    }
                }
            }
        }
        out
    }
}

/// The same listing taken from a real directory.
pub fn disk_tree(root: &std::path::Path) -> BTreeMap<String, Entry> {
    use std::os::unix::fs::PermissionsExt;
    let mut out = BTreeMap::new();
    let mut stack = vec![(root.to_path_buf(), String::new())];
    while let Some((dir, prefix)) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let entry = entry.unwrap();
            let name = entry.file_name().into_string().unwrap();
            let path = format!("{prefix}/{name}");
            let meta = std::fs::symlink_metadata(entry.path()).unwrap();
            let mode = (meta.permissions().mode() & 0o7777) as u16;
            if meta.is_dir() {
                out.insert(path.clone(), Entry::Dir { mode });
                stack.push((entry.path(), path));
            } else {
                out.insert(
                    path,
                    Entry::File {
                        data: std::fs::read(entry.path()).unwrap(),
                        mode,
                    },
                );
            }
        }
    }
    out
}

/// Replies with modification times zeroed, for comparison.
pub fn without_mtime(reply: Res<FsReply>) -> Res<FsReply> {
    reply.map(|r| match r {
        FsReply::Attr { mut attr } => {
            attr.mtime = 0;
            FsReply::Attr { attr }
        }
        FsReply::Opened { fh, mut attr } => {
            attr.mtime = 0;
            FsReply::Opened { fh, attr }
        }
        other => other,
    })
}
