use crystvox_tensor::{checkpoint, ParamStore, Tensor};

#[test]
fn round_trips_params_and_buffers() {
    let mut store = ParamStore::<f32>::new();
    store.insert("enc.conv1.w", Tensor::new(&[2, 1, 3, 3, 3], (0..54).map(|i| i as f32 * 0.25 - 3.0).collect()).unwrap());
    store.insert("enc.fc.b", Tensor::new(&[4], vec![1.0, -2.0, f32::MIN_POSITIVE, 1e30]).unwrap());
    store.insert_buffer("enc.bn1.running", Tensor::new(&[2, 2], vec![0.1, 0.2, 1.0, 2.0]).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.vxck");
    checkpoint::save(&store, &path).unwrap();
    let back: ParamStore<f32> = checkpoint::load(&path).unwrap();
    assert_eq!(back.len(), 2);
    for (name, t) in store.iter() {
        assert_eq!(back.get(name), Some(t));
    }
    assert_eq!(back.buffer("enc.bn1.running"), store.buffer("enc.bn1.running"));

    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"VXCK");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
}

#[test]
fn rejects_bad_magic_and_truncation() {
    let mut store = ParamStore::<f32>::new();
    store.insert("w", Tensor::full(&[8], 1.5));
    let mut bytes = Vec::new();
    checkpoint::write(&store, &mut bytes).unwrap();
    let truncated = &bytes[..bytes.len() - 3];
    assert!(checkpoint::read::<f32, _>(truncated).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(checkpoint::read::<f32, _>(bad.as_slice()).is_err());
    assert!(checkpoint::read::<f32, _>(bytes.as_slice()).is_ok());
}
