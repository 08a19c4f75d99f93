import numpy as np
import pytest

from eal import scenegraph as sg


def scenes_equal(a, b):
    if len(a.objects) != len(b.objects):
        return False
    for oa, ob in zip(a.objects, b.objects):
        if oa.label != ob.label or oa.room_label != ob.room_label:
            return False
        if not np.array_equal(oa.base_position, ob.base_position):
            return False
        if not np.array_equal(oa.mesh.texture, ob.mesh.texture):
            return False
        if not np.array_equal(oa.mesh.vertices, ob.mesh.vertices):
            return False
    return np.array_equal(a.walkable, b.walkable)


def test_generate_house_deterministic():
    assert scenes_equal(sg.generate_house(7), sg.generate_house(7))


def test_zero_rooms_rejected():
    with pytest.raises(sg.InvalidConfigError):
        sg.generate_house(1, sg.GenerationConfig(rooms=0))
    with pytest.raises(sg.InvalidConfigError):
        sg.generate_house(1, sg.GenerationConfig(objects_per_room=0))


def test_objects_inside_room_rectangles():
    scene = sg.generate_house(1, sg.GenerationConfig(rooms=2, objects_per_room=2))
    assert len(scene.objects) == 4
    for obj in scene.objects:
        px, pz = obj.base_position[0], obj.base_position[2]
        containing = [r for r in scene.rooms
                      if r.rect[0] <= px <= r.rect[2] and r.rect[1] <= pz <= r.rect[3]]
        assert len(containing) == 1
        assert containing[0].label == obj.room_label


def test_object_footprints_blocked():
    scene = sg.generate_house(3)
    for obj in scene.objects:
        ix, iz = scene.cell_of(obj.base_position[0], obj.base_position[2])
        assert not scene.walkable[iz, ix]


def test_question_answers_match_ground_truth():
    for seed in range(10):
        scene = sg.generate_house(seed)
        for qseed in range(3):
            q = sg.generate_question(scene, qseed)
            target = scene.object_by_id(q.target_object_id)
            ans = sg.ANSWERS[q.answer]
            if q.template == "color":
                assert ans == sg.dominant_color(target.mesh.texture)
            elif q.template == "location":
                assert ans == target.room_label
            else:
                # brute-force nearest neighbor oracle
                best, bestd = None, np.inf
                for o in scene.objects:
                    if o.id == target.id or o.room_label != target.room_label:
                        continue
                    d = np.linalg.norm(o.base_position - target.base_position)
                    if d < bestd:
                        best, bestd = o, d
                assert best is not None and ans == best.label


def test_composition_uses_nearest_neighbor():
    scene = sg.generate_house(11)
    target = scene.objects[0]
    q = sg.generate_question(scene, 0, template="composition",
                             target_id=target.id)
    dists = [(np.linalg.norm(o.base_position - target.base_position), o.label)
             for o in scene.objects
             if o.id != target.id and o.room_label == target.room_label]
    assert sg.ANSWERS[q.answer] == min(dists)[1]


def test_shortest_path_ends_with_stop_and_reaches_target():
    for seed in range(20):
        scene = sg.generate_house(seed)
        ep = sg.generate_episode(scene, seed)
        assert ep.shortest_path[-1] == sg.STOP
        poses = sg.execute_actions(scene, ep.start_pose, ep.shortest_path)
        target = scene.object_by_id(ep.question.target_object_id)
        c = target.centroid()
        d = np.hypot(poses[-1].position[0] - c[0], poses[-1].position[2] - c[2])
        # within one grid cell of the footprint: centroid distance bounded by
        # half the footprint diagonal plus 1.5 cells
        bound = np.hypot(target.size[0], target.size[2]) / 2 + 1.5 * scene.cell_size + 1e-9
        assert d <= bound + scene.cell_size


def oracle_bfs_distance(scene, start_state, goals):
    """Independent plain BFS over (ix, iz, heading) states."""
    from collections import deque
    if start_state in goals:
        return 0
    gz, gx = scene.walkable.shape
    dxz = {0: (0, 1), 1: (1, 0), 2: (0, -1), 3: (-1, 0)}
    dist = {start_state: 0}
    q = deque([start_state])
    while q:
        ix, iz, h = q.popleft()
        d = dist[(ix, iz, h)]
        nxt = []
        dx, dz = dxz[h]
        if 0 <= ix + dx < gx and 0 <= iz + dz < gz and scene.walkable[iz + dz, ix + dx]:
            nxt.append((ix + dx, iz + dz, h))
        nxt.append((ix, iz, (h + 1) % 4))
        nxt.append((ix, iz, (h - 1) % 4))
        for s in nxt:
            if s not in dist:
                dist[s] = d + 1
                if s in goals:
                    return d + 1
                q.append(s)
    return None


def oracle_goals(scene, target):
    """Recompute goal states from first principles: walkable cells within one
    cell of the footprint, heading within 60 degrees of the centroid bearing."""
    gz, gx = scene.walkable.shape
    cell = scene.cell_size
    x0 = target.base_position[0] - target.size[0] / 2
    x1 = target.base_position[0] + target.size[0] / 2
    z0 = target.base_position[2] - target.size[2] / 2
    z1 = target.base_position[2] + target.size[2] / 2
    foot = set()
    for iz in range(gz):
        for ix in range(gx):
            cx0, cz0 = ix * cell, iz * cell
            if cx0 < x1 and cx0 + cell > x0 and cz0 < z1 and cz0 + cell > z0:
                foot.add((ix, iz))
    goals = set()
    for (ix, iz) in foot:
        for dz in (-1, 0, 1):
            for dx in (-1, 0, 1):
                nx, nz = ix + dx, iz + dz
                if 0 <= nx < gx and 0 <= nz < gz and scene.walkable[nz, nx]:
                    px = (nx + 0.5) * cell
                    pz = (nz + 0.5) * cell
                    bearing = np.arctan2(target.base_position[0] - px,
                                         target.base_position[2] - pz)
                    for h in range(4):
                        diff = (bearing - h * np.pi / 2 + np.pi) % (2 * np.pi) - np.pi
                        if abs(diff) <= np.deg2rad(60):
                            goals.add((nx, nz, h))
    return goals


def test_shortest_path_optimal_vs_bfs_oracle():
    checked = 0
    for seed in range(100):
        scene = sg.generate_house(seed)
        ep = sg.generate_episode(scene, seed * 13 + 1)
        target = scene.object_by_id(ep.question.target_object_id)
        ix, iz = scene.cell_of(ep.start_pose.position[0], ep.start_pose.position[2])
        h = sg.heading_of_yaw(ep.start_pose.yaw)
        goals = oracle_goals(scene, target)
        d = oracle_bfs_distance(scene, (ix, iz, h), goals)
        assert d is not None
        # path includes the trailing stop
        assert len(ep.shortest_path) == d + 1
        checked += 1
    assert checked == 100


def test_unreachable_target_raises():
    scene = sg.generate_house(0)
    # wall the start cell in completely
    blocked = scene.walkable.copy()
    ix, iz = None, None
    cells = np.argwhere(blocked)
    for cz, cx in cells:
        blocked2 = blocked.copy()
        blocked2[cz + 1:cz + 2, cx] = False
        blocked2[max(0, cz - 1):cz, cx] = False
        blocked2[cz, cx + 1:cx + 2] = False
        blocked2[cz, max(0, cx - 1):cx] = False
        ix, iz = cx, cz
        break
    scene2 = sg.Scene(objects=scene.objects, rooms=scene.rooms,
                      walkable=blocked2, background_color=scene.background_color,
                      walls=scene.walls, cell_size=scene.cell_size,
                      grid_origin=scene.grid_origin,
                      eye_height=scene.eye_height, fov=scene.fov)
    pose = sg.pose_for(scene2, ix, iz, 0)
    target = scene.objects[-1]
    far_enough = np.hypot(target.base_position[0] - pose.position[0],
                          target.base_position[2] - pose.position[2]) > 1.0
    if far_enough:
        with pytest.raises(sg.UnreachableTargetError):
            sg.shortest_path(scene2, pose, target.id)


def test_scene_set_roundtrip(tmp_path):
    scenes = [sg.generate_house(s) for s in range(3)]
    path = tmp_path / "scenes.eal"
    sg.save_scenes(path, scenes, meta={"seed": "0..2"})
    loaded, meta = sg.load_scenes(path)
    assert meta["seed"] == "0..2"
    assert len(loaded) == 3
    for a, b in zip(scenes, loaded):
        assert scenes_equal(a, b)
        assert a.fov == b.fov and a.eye_height == b.eye_height


def test_scene_set_header_required(tmp_path):
    p = tmp_path / "bad.eal"
    p.write_text("not a scene file\n")
    with pytest.raises(sg.SceneFormatError):
        sg.load_scenes(p)


def test_episode_manifest_roundtrip(tmp_path):
    scenes = [sg.generate_house(s) for s in range(2)]
    episodes = [sg.generate_episode(scenes[i % 2], i, scene_index=i % 2)
                for i in range(4)]
    spath, epath = tmp_path / "s.eal", tmp_path / "e.eal"
    sg.save_scenes(spath, scenes)
    sg.save_episodes(epath, episodes)
    loaded_s, _ = sg.load_scenes(spath)
    loaded_e = sg.load_episodes(epath, loaded_s)
    for a, b in zip(episodes, loaded_e):
        assert a.shortest_path == b.shortest_path
        assert a.question.text_tokens == b.question.text_tokens
        assert a.question.answer == b.question.answer
        assert np.array_equal(a.start_pose.position, b.start_pose.position)
        assert a.difficulty == b.difficulty


def test_gen_twice_identical_files(tmp_path):
    p1, p2 = tmp_path / "a.eal", tmp_path / "b.eal"
    sg.save_scenes(p1, [sg.generate_house(7)])
    sg.save_scenes(p2, [sg.generate_house(7)])
    assert p1.read_bytes() == p2.read_bytes()
